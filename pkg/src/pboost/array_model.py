"""Array geometry, steering vectors, whitened codebooks and snapshot synthesis.

DOAs are azimuth angles in degrees, measured from broadside.  A sensor at
position ``p`` (wavelength units) sees a plane wave from azimuth ``theta``
with phase ``2*pi * p . u(theta)`` where ``u = (sin theta, cos theta, 0)``,
so a ULA laid out along the x axis has the familiar
``exp(j*2*pi*x_m*sin(theta))`` response.

Gradients are taken with respect to the angle in *degrees*, which keeps them
consistent with quantization steps expressed in degrees.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np

__all__ = [
    "ArrayModelError",
    "EndfireError",
    "IllConditionedNoiseError",
    "ArrayGeometry",
    "NoiseModel",
    "SteeringCodebook",
    "Scenario",
    "SnapshotBatch",
    "MaternParams",
    "as_generator",
    "steering_matrix",
    "steering_gradient",
    "ula_steering",
    "uniform_grid",
    "build_codebook",
    "coherent_covariance",
    "fixed_scenario",
    "synthesize_snapshots",
    "generate_matern_scenario",
]

DEG = np.pi / 180.0
MAX_NOISE_CONDITION = 1e12


class ArrayModelError(ValueError):
    """Invalid array, noise or scenario description."""


class EndfireError(ArrayModelError):
    """Steering requested at or beyond endfire for a linear array."""


class IllConditionedNoiseError(ArrayModelError):
    """Noise covariance too close to singular to whiten."""


def as_generator(seed) -> np.random.Generator:
    """Coerce an int, SeedSequence or Generator into a Generator."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


@dataclass(frozen=True, eq=False)
class ArrayGeometry:
    """Sensor positions (wavelength units) and per-sensor complex gains."""

    positions: np.ndarray
    gains: np.ndarray = None

    def __post_init__(self):
        pos = np.atleast_2d(np.asarray(self.positions, dtype=float))
        if pos.shape[1] == 1:
            pos = np.hstack([pos, np.zeros((pos.shape[0], 2))])
        elif pos.shape[1] == 2:
            pos = np.hstack([pos, np.zeros((pos.shape[0], 1))])
        if pos.ndim != 2 or pos.shape[1] != 3:
            raise ArrayModelError("positions must be an (M, 3) array")
        if pos.shape[0] < 2:
            raise ArrayModelError("an array needs at least 2 sensors")
        if not np.all(np.isfinite(pos)):
            raise ArrayModelError("sensor positions must be finite")
        gains = self.gains
        if gains is None:
            gains = np.ones(pos.shape[0], dtype=complex)
        gains = np.asarray(gains, dtype=complex).reshape(-1)
        if gains.shape[0] != pos.shape[0]:
            raise ArrayModelError("one gain per sensor is required")
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "gains", gains)

    @classmethod
    def ula(cls, n_sensors: int = 8, spacing: float = 0.5) -> "ArrayGeometry":
        """Uniform linear array along x, phase-referenced to its centroid."""
        x = (np.arange(n_sensors) - (n_sensors - 1) / 2.0) * spacing
        return cls(np.column_stack([x, np.zeros(n_sensors), np.zeros(n_sensors)]))

    @property
    def n_sensors(self) -> int:
        return self.positions.shape[0]

    @cached_property
    def is_linear(self) -> bool:
        """True when all sensors lie on the x axis (endfire is singular)."""
        return bool(np.all(self.positions[:, 1:] == 0.0))


def _direction(theta_deg):
    t = np.asarray(theta_deg, dtype=float) * DEG
    return np.stack([np.sin(t), np.cos(t), np.zeros_like(t)])


def _check_endfire(geometry: ArrayGeometry, theta_deg):
    if geometry.is_linear and np.any(np.abs(np.asarray(theta_deg)) >= 90.0):
        raise EndfireError("linear array steering requires |theta| < 90 degrees")


def steering_matrix(geometry: ArrayGeometry, theta_deg) -> np.ndarray:
    """Raw steering vectors, shape (M, Q) for Q angles."""
    theta = np.atleast_1d(np.asarray(theta_deg, dtype=float))
    _check_endfire(geometry, theta)
    phase = 2.0 * np.pi * geometry.positions @ _direction(theta)
    return geometry.gains[:, None] * np.exp(1j * phase)


def steering_gradient(geometry: ArrayGeometry, theta_deg) -> np.ndarray:
    """Derivative of the steering vectors with respect to theta in degrees."""
    theta = np.atleast_1d(np.asarray(theta_deg, dtype=float))
    t = theta * DEG
    ddir = np.stack([np.cos(t), -np.sin(t), np.zeros_like(t)]) * DEG
    dphase = 2.0 * np.pi * geometry.positions @ ddir
    return 1j * dphase * steering_matrix(geometry, theta)


def ula_steering(geometry: ArrayGeometry, theta_deg: float) -> np.ndarray:
    """Steering vector for a single angle, shape (M,)."""
    return steering_matrix(geometry, [theta_deg])[:, 0]


def uniform_grid(start: float = -89.5, stop: float = 89.5, step: float = 1.0) -> np.ndarray:
    """Inclusive uniform DOA grid; the default is the 180-point 1 degree grid."""
    n = int(round((stop - start) / step)) + 1
    return start + step * np.arange(n)


@dataclass(frozen=True, eq=False)
class NoiseModel:
    """Noise covariance known up to the positive scale ``scale``."""

    covariance: np.ndarray
    scale: float = 1.0

    def __post_init__(self):
        cov = np.asarray(self.covariance, dtype=complex)
        if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
            raise ArrayModelError("noise covariance must be square")
        norm = np.linalg.norm(cov)
        if np.linalg.norm(cov - cov.conj().T) > 1e-12 * max(norm, 1.0):
            raise ArrayModelError("noise covariance must be Hermitian")
        cov = 0.5 * (cov + cov.conj().T)
        if np.linalg.eigvalsh(cov).min() <= 0.0:
            raise ArrayModelError("noise covariance must be positive definite")
        if not self.scale > 0:
            raise ArrayModelError("noise scale must be positive")
        object.__setattr__(self, "covariance", cov)

    @classmethod
    def white(cls, n_sensors: int, scale: float = 1.0) -> "NoiseModel":
        return cls(np.eye(n_sensors, dtype=complex), scale)

    @property
    def n_sensors(self) -> int:
        return self.covariance.shape[0]

    @cached_property
    def is_white(self) -> bool:
        return bool(np.array_equal(self.covariance, np.eye(self.n_sensors)))

    @cached_property
    def _eig(self):
        w, v = np.linalg.eigh(self.covariance)
        if w.max() / w.min() > MAX_NOISE_CONDITION:
            raise IllConditionedNoiseError(
                f"noise covariance condition number {w.max() / w.min():.3g} exceeds "
                f"{MAX_NOISE_CONDITION:.0e}"
            )
        return w, v

    @cached_property
    def whitener(self) -> np.ndarray:
        """Hermitian inverse square root of the covariance."""
        if self.is_white:
            return np.eye(self.n_sensors, dtype=complex)
        w, v = self._eig
        return (v / np.sqrt(w)) @ v.conj().T

    @cached_property
    def sqrt(self) -> np.ndarray:
        """Hermitian square root of the covariance."""
        if self.is_white:
            return np.eye(self.n_sensors, dtype=complex)
        w, v = self._eig
        return (v * np.sqrt(w)) @ v.conj().T

    def whiten(self, x: np.ndarray) -> np.ndarray:
        if self.is_white:
            return np.asarray(x)
        return self.whitener @ x


@dataclass(frozen=True, eq=False)
class SteeringCodebook:
    """Whitened steering dictionary ``B`` over a 1-D DOA grid."""

    grid: np.ndarray
    columns: np.ndarray
    gradients: np.ndarray
    quantization_step: float
    geometry: ArrayGeometry
    noise: NoiseModel

    @property
    def n_sensors(self) -> int:
        return self.columns.shape[0]

    @property
    def size(self) -> int:
        return self.columns.shape[1]

    def nearest_index(self, theta_deg) -> np.ndarray:
        """Index of the grid angle closest to each requested angle."""
        theta = np.atleast_1d(np.asarray(theta_deg, dtype=float))
        return np.abs(theta[:, None] - self.grid[None, :]).argmin(axis=1)

    def steer(self, theta_deg) -> np.ndarray:
        """Whitened steering vectors at arbitrary (off-grid) angles."""
        return self.noise.whiten(steering_matrix(self.geometry, theta_deg))

    def steer_gradient(self, theta_deg) -> np.ndarray:
        return self.noise.whiten(steering_gradient(self.geometry, theta_deg))


def build_codebook(geometry: ArrayGeometry, noise: NoiseModel, grid: Sequence[float]) -> SteeringCodebook:
    """Whiten the steering vectors (and their gradients) over ``grid``."""
    grid = np.asarray(grid, dtype=float).reshape(-1)
    if grid.size == 0:
        raise ArrayModelError("codebook grid must be nonempty")
    if grid.size > 1 and np.any(np.diff(grid) <= 0):
        raise ArrayModelError("codebook grid must be strictly increasing")
    if noise.n_sensors != geometry.n_sensors:
        raise ArrayModelError("noise model and geometry disagree on the sensor count")
    noise.whitener  # raises on ill-conditioned noise before any work
    columns = noise.whiten(steering_matrix(geometry, grid))
    gradients = noise.whiten(steering_gradient(geometry, grid))
    step = float(np.median(np.diff(grid))) if grid.size > 1 else 0.0
    return SteeringCodebook(grid, columns, gradients, step, geometry, noise)


@dataclass(frozen=True, eq=False)
class Scenario:
    """Source configuration for one realization.

    ``source_covariance`` is expressed for unit-power sources; the SNR scales
    it.  ``coherence_groups`` lists index tuples of mutually coherent paths.
    """

    true_doas: np.ndarray
    source_covariance: np.ndarray
    snr_db: float
    n_snapshots: int
    coherence_groups: tuple = field(default_factory=tuple)

    def __post_init__(self):
        doas = np.asarray(self.true_doas, dtype=float).reshape(-1)
        p = np.asarray(self.source_covariance, dtype=complex).reshape(doas.size, doas.size)
        if doas.size and np.linalg.norm(p - p.conj().T) > 1e-10 * max(np.linalg.norm(p), 1.0):
            raise ArrayModelError("source covariance must be Hermitian")
        p = 0.5 * (p + p.conj().T)
        if doas.size and np.linalg.eigvalsh(p).min() < -1e-10 * max(np.abs(p).max(), 1.0):
            raise ArrayModelError("source covariance must be positive semidefinite")
        if not np.isfinite(self.snr_db):
            raise ArrayModelError("SNR must be finite")
        object.__setattr__(self, "true_doas", doas)
        object.__setattr__(self, "source_covariance", p)
        object.__setattr__(self, "coherence_groups", tuple(tuple(g) for g in self.coherence_groups))
        if self.n_snapshots < self.rank + 1:
            raise ArrayModelError("need at least K+1 snapshots for the noise level")

    @property
    def n_sources(self) -> int:
        return self.true_doas.size

    @cached_property
    def rank(self) -> int:
        if self.n_sources == 0:
            return 0
        w = np.linalg.eigvalsh(self.source_covariance)
        return int(np.sum(w > 1e-10 * max(w.max(), 1e-300)))

    def overloaded(self, n_sensors: int) -> bool:
        return self.n_sources >= n_sensors


@dataclass(frozen=True, eq=False)
class SnapshotBatch:
    data: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.data, dtype=complex)
        if x.ndim != 2 or x.shape[1] < 1:
            raise ArrayModelError("snapshot data must be (M, N) with N >= 1")
        if not np.all(np.isfinite(x)):
            raise ArrayModelError("snapshot data contains NaN or Inf")
        object.__setattr__(self, "data", x)

    @property
    def n_sensors(self) -> int:
        return self.data.shape[0]

    @property
    def n_snapshots(self) -> int:
        return self.data.shape[1]

    def to_csv(self, path, header: str = "") -> None:
        """One row per sensor, columns re0, im0, re1, im1, ..."""
        inter = np.empty((self.n_sensors, 2 * self.n_snapshots))
        inter[:, 0::2] = self.data.real
        inter[:, 1::2] = self.data.imag
        np.savetxt(path, inter, delimiter=",", fmt="%.17g", header=header)

    @classmethod
    def from_csv(cls, path) -> "SnapshotBatch":
        inter = np.loadtxt(path, delimiter=",", ndmin=2)
        return cls(inter[:, 0::2] + 1j * inter[:, 1::2])


def coherent_covariance(n_paths: int, groups=(), phases=None, powers=None, rng=None) -> np.ndarray:
    """Source covariance where each group shares one innovation.

    Paths in the same group get unit-modulus mixing weights; unlisted paths are
    mutually uncorrelated.  Phases default to uniform random draws from ``rng``.
    """
    powers = np.ones(n_paths) if powers is None else np.asarray(powers, dtype=float)
    if phases is None:
        phases = as_generator(rng).uniform(0.0, 2.0 * np.pi, n_paths)
    w = np.sqrt(powers) * np.exp(1j * np.asarray(phases, dtype=float))
    p = np.diag(powers).astype(complex)
    for g in groups:
        g = list(g)
        p[np.ix_(g, g)] = np.outer(w[g], w[g].conj())
    return p


def fixed_scenario(doas, snr_db, n_snapshots=100, groups=(), phases=None, rng=None) -> Scenario:
    """Equi-powered scenario with optional fully coherent groups."""
    doas = np.asarray(doas, dtype=float)
    p = coherent_covariance(doas.size, groups, phases=phases, rng=rng)
    return Scenario(doas, p, snr_db, n_snapshots, groups)


def _covariance_factor(p: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(p)
    keep = w > 1e-10 * max(w.max(), 1e-300)
    return v[:, keep] * np.sqrt(w[keep])


def synthesize_snapshots(scenario: Scenario, geometry: ArrayGeometry, noise: NoiseModel, rng_seed) -> SnapshotBatch:
    """Draw ``x(n) = A s(n) + v(n)`` with circular Gaussian signals and noise."""
    rng = as_generator(rng_seed)
    m, n = geometry.n_sensors, scenario.n_snapshots
    if noise.n_sensors != m:
        raise ArrayModelError("noise model and geometry disagree on the sensor count")

    def cn(*shape):
        return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2.0)

    x = np.sqrt(noise.scale) * (noise.sqrt @ cn(m, n))
    if scenario.n_sources:
        f = _covariance_factor(scenario.source_covariance)
        power = 10.0 ** (scenario.snr_db / 10.0) * noise.scale
        s = np.sqrt(power) * (f @ cn(f.shape[1], n))
        x = x + steering_matrix(geometry, scenario.true_doas) @ s
    return SnapshotBatch(x)


@dataclass(frozen=True)
class MaternParams:
    """Clustered random environment (marked Matern cluster process)."""

    cluster_intensity: float = 1.0
    center_bound_deg: float = 60.0
    sector_width_deg: float = 18.0
    source_intensity: float = 2.0
    correlation_radius_factor: float = 1.5
    snr_db: float = 0.0
    n_snapshots: int = 100


def generate_matern_scenario(rng_seed, params: MaternParams = MaternParams()) -> Scenario:
    """Draw one random cluster environment.

    Sources sit uniformly in a disk around each cluster centre whose angular
    projection spans ``sector_width_deg``.  Within a cluster the signals are
    correlated by a sinc law of the inter-source distance (first zero at
    ``correlation_radius_factor`` disk radii) and carry Rayleigh amplitudes of
    unit mean power; clusters are mutually uncorrelated.
    """
    rng = as_generator(rng_seed)
    n_clusters = rng.poisson(params.cluster_intensity)
    half = params.sector_width_deg / 2.0
    doas, blocks, groups = [], [], []
    start = 0
    for _ in range(n_clusters):
        center = rng.uniform(-params.center_bound_deg, params.center_bound_deg)
        n_src = rng.poisson(params.source_intensity)
        if n_src == 0:
            continue
        r = np.sqrt(rng.uniform(size=n_src))
        phi = rng.uniform(0.0, 2.0 * np.pi, n_src)
        pts = np.column_stack([r * np.cos(phi), r * np.sin(phi)])
        dist = np.linalg.norm(pts[:, None, :] - pts[None, :, :], axis=-1)
        rho = np.sinc(dist / params.correlation_radius_factor)
        amp = (rng.standard_normal(n_src) + 1j * rng.standard_normal(n_src)) / np.sqrt(2.0)
        block = amp[:, None] * rho * amp.conj()[None, :]
        w, v = np.linalg.eigh(0.5 * (block + block.conj().T))
        blocks.append((v * np.clip(w, 0.0, None)) @ v.conj().T)
        doas.extend(center + half * pts[:, 0])
        groups.append(tuple(range(start, start + n_src)))
        start += n_src
    d = len(doas)
    p = np.zeros((d, d), dtype=complex)
    for g, block in zip(groups, blocks):
        p[np.ix_(g, g)] = block
    return Scenario(np.array(doas), p, params.snr_db, params.n_snapshots, tuple(groups))
