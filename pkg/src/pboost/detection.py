"""Spectral peak extraction and AIC-type validation of quantized DOA candidates."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .array_model import SteeringCodebook, as_generator
from .subspace import SubspaceEstimate

__all__ = [
    "PeakSet",
    "AicDecision",
    "find_peaks",
    "parabolic_offset",
    "steering_dispersion",
    "regularized_fit_error",
    "aic_score",
    "aic_validate",
]

# neighbours below this fraction of the peak make the log-parabola meaningless
_LOG_FLOOR = 1e-12


@dataclass(frozen=True, eq=False)
class PeakSet:
    """Local maxima of a grid spectrum, strongest first.

    ``interpolated_doas`` are the parabolic vertices before snapping;
    ``refined_doas`` are the same estimates reassigned to the closest grid angle.
    """

    indices: np.ndarray
    refined_doas: np.ndarray
    amplitudes: np.ndarray
    interpolated_doas: np.ndarray
    snapped_indices: np.ndarray

    @property
    def count(self) -> int:
        return int(self.indices.size)

    @classmethod
    def empty(cls) -> "PeakSet":
        z = np.zeros(0)
        zi = np.zeros(0, dtype=int)
        return cls(zi, z, z, z, zi)


def parabolic_offset(y_minus: float, y0: float, y_plus: float) -> float:
    """Vertex of the parabola through three equispaced samples, in grid steps."""
    den = y_minus - 2.0 * y0 + y_plus
    if den >= 0:
        return 0.0
    return float(np.clip(0.5 * (y_minus - y_plus) / den, -0.5, 0.5))


def find_peaks(amplitudes, codebook: SteeringCodebook, max_peaks: int | None = None) -> PeakSet:
    """Strict interior maxima of ``amplitudes``, refined on the log scale.

    ``amplitudes`` may be an array or any object exposing ``.amplitudes``.
    At most ``max_peaks`` (default ``M - 1``) peaks are kept, sorted by
    non-increasing refined magnitude.
    """
    a = np.asarray(getattr(amplitudes, "amplitudes", amplitudes), dtype=float)
    m = codebook.n_sensors
    max_peaks = m - 1 if max_peaks is None else int(max_peaks)
    if max_peaks >= m:
        raise ValueError(f"max_peaks must be below the sensor count {m}")
    if a.size < 3 or max_peaks <= 0:
        return PeakSet.empty()
    mid = a[1:-1]
    idx = np.flatnonzero((mid > a[:-2]) & (mid > a[2:])) + 1
    if idx.size == 0:
        return PeakSet.empty()
    step = codebook.quantization_step
    offs = np.zeros(idx.size)
    mags = a[idx].copy()
    for n, i in enumerate(idx):
        lo, c, hi = a[i - 1], a[i], a[i + 1]
        if min(lo, hi) <= _LOG_FLOOR * c:
            continue
        y = np.log([lo, c, hi])
        d = parabolic_offset(*y)
        offs[n] = d
        # vertex value of the fitted parabola
        mags[n] = float(np.exp(y[1] - 0.25 * (y[0] - y[2]) * d))
    order = np.lexsort((idx, -mags))[:max_peaks]
    idx, offs, mags = idx[order], offs[order], mags[order]
    interp = codebook.grid[idx] + offs * step
    snapped = codebook.nearest_index(interp) if interp.size else np.zeros(0, dtype=int)
    return PeakSet(idx, codebook.grid[snapped], mags, interp, snapped)


def steering_dispersion(codebook: SteeringCodebook, peak_index, quantization_step: float | None = None):
    """``G(d,d) = sqrt(step^2 / 12) * ||grad b||`` for uniform intra-cell mismatch."""
    step = codebook.quantization_step if quantization_step is None else float(quantization_step)
    g = codebook.gradients[:, np.atleast_1d(peak_index)]
    out = np.sqrt(step ** 2 / 12.0) * np.linalg.norm(g, axis=0)
    return out if np.ndim(peak_index) else float(out[0])


def regularized_fit_error(columns: np.ndarray, reg: np.ndarray, target: np.ndarray) -> float:
    """Total LS error of ``[columns; diag(reg)] S ~ [target; 0]``."""
    if columns.shape[1] == 0:
        return float(np.linalg.norm(target) ** 2)
    a = np.vstack([columns, np.diag(reg).astype(complex)])
    rhs = np.vstack([target, np.zeros((columns.shape[1], target.shape[1]), dtype=complex)])
    s, *_ = np.linalg.lstsq(a, rhs, rcond=None)
    return float(np.linalg.norm(a @ s - rhs) ** 2)


def aic_score(mu: float, n_sensors: int, rank: int, n_paths: int) -> float:
    """``2 {MK log(pi mu / MK) + MK + (2 D K + 1)}``."""
    mk = n_sensors * rank
    return 2.0 * (mk * np.log(np.pi * max(mu, 1e-300) / mk) + mk + (2 * n_paths * rank + 1))


@dataclass(frozen=True, eq=False)
class AicDecision:
    """Outcome of the nested top-D hypothesis sweep ``D = 0..Q1``.

    ``delta_terms`` is zero in the analytic mode.  In the sampled mode it is
    ``mean_p log(mu_p / <mu>)``, the part the first-order averaging neglects.
    """

    selected_d: int
    selected_doas: np.ndarray
    selected_indices: np.ndarray
    aic_curve: np.ndarray
    mean_error: np.ndarray
    regularizer: np.ndarray
    delta_terms: np.ndarray
    mode: str = "analytic"
    n_samples: int = 0
    extra: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps({
            "selected_d": self.selected_d,
            "selected_doas": self.selected_doas.tolist(),
            "selected_indices": self.selected_indices.tolist(),
            "aic_curve": self.aic_curve.tolist(),
            "mean_error": self.mean_error.tolist(),
            "regularizer": self.regularizer.tolist(),
            "delta_terms": self.delta_terms.tolist(),
            "mode": self.mode,
            "n_samples": self.n_samples,
        }, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "AicDecision":
        d = json.loads(text)
        return cls(int(d["selected_d"]), np.asarray(d["selected_doas"], dtype=float),
                   np.asarray(d["selected_indices"], dtype=int), np.asarray(d["aic_curve"]),
                   np.asarray(d["mean_error"]), np.asarray(d["regularizer"]),
                   np.asarray(d["delta_terms"]), d.get("mode", "analytic"), int(d.get("n_samples", 0)))


def aic_validate(peaks: PeakSet, subspace: SubspaceEstimate, codebook: SteeringCodebook,
                 n_samples: int | None = None, rng=None) -> AicDecision:
    """Select the number of sources among the strongest peaks.

    The default analytic mode averages the grid mismatch through the diagonal
    regularizer ``G``.  With ``n_samples=P`` the hypotheses are instead fitted
    on ``P`` concatenated, randomly perturbed steering sets.
    """
    target = subspace.weighted_signal
    m, k = codebook.n_sensors, subspace.rank
    q1 = peaks.count
    idx = peaks.snapped_indices
    reg = steering_dispersion(codebook, idx) if q1 else np.zeros(0)
    mu = np.zeros(q1 + 1)
    delta = np.zeros(q1 + 1)
    if n_samples:
        gen = as_generator(rng)
        p = int(n_samples)
        step = codebook.quantization_step
        shifts = gen.uniform(-0.5 * step, 0.5 * step, size=(p, q1))
        stacked_target = np.vstack([target] * p)
        for d in range(q1 + 1):
            if d == 0:
                mu[0] = float(np.linalg.norm(target) ** 2)
                continue
            sets = [codebook.steer(codebook.grid[idx[:d]] + shifts[i, :d]) for i in range(p)]
            a = np.vstack(sets)
            s, *_ = np.linalg.lstsq(a, stacked_target, rcond=None)
            per = np.array([np.linalg.norm(sets[i] @ s - target) ** 2 for i in range(p)])
            mu[d] = per.mean()
            delta[d] = float(np.mean(np.log(np.maximum(per, 1e-300) / max(mu[d], 1e-300))))
        mode = "sampled"
    else:
        p = 0
        for d in range(q1 + 1):
            mu[d] = regularized_fit_error(codebook.columns[:, idx[:d]], reg[:d], target)
        mode = "analytic"
    curve = np.array([aic_score(mu[d], m, k, d) for d in range(q1 + 1)])
    d_hat = int(np.argmin(curve))
    return AicDecision(d_hat, codebook.grid[idx[:d_hat]], idx[:d_hat].copy(), curve, mu, reg, delta, mode, p)
