"""Sample covariance, noise whitening and signal/noise subspace extraction."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .array_model import NoiseModel, SnapshotBatch

__all__ = [
    "SubspaceError",
    "InvalidRankError",
    "CovarianceError",
    "DegenerateNoiseError",
    "SubspaceEstimate",
    "WsfResidualModel",
    "sample_covariance",
    "whiten_and_eig",
    "subspace_weights",
    "estimate_rank",
    "subspace_from_snapshots",
]


class SubspaceError(ValueError):
    pass


class InvalidRankError(SubspaceError):
    pass


class CovarianceError(SubspaceError):
    pass


class DegenerateNoiseError(SubspaceError):
    pass


def _fix_phase(v: np.ndarray) -> np.ndarray:
    # largest-magnitude entry of each column made real positive
    idx = np.abs(v).argmax(axis=0)
    ref = v[idx, np.arange(v.shape[1])]
    return v * (np.abs(ref) / ref)


@dataclass(frozen=True, eq=False)
class SubspaceEstimate:
    """Whitened-covariance eigenstructure split at rank ``K``.

    ``weights`` holds the diagonal of the finite-sample WSF weighting; the
    matrix form is :attr:`w_s`.
    """

    e_s: np.ndarray
    e_v: np.ndarray
    eigenvalues: np.ndarray
    noise_level: float
    weights: np.ndarray
    n_snapshots: int

    @property
    def rank(self) -> int:
        return self.e_s.shape[1]

    @property
    def n_sensors(self) -> int:
        return self.e_s.shape[0]

    @property
    def w_s(self) -> np.ndarray:
        return np.diag(self.weights)

    @property
    def weighted_signal(self) -> np.ndarray:
        """``E_s W_s``, the WSF fitting target (M x K)."""
        return self.e_s * self.weights

    def residual_model(self) -> "WsfResidualModel":
        return WsfResidualModel(1.0 / self.n_snapshots, (self.n_sensors - self.rank, self.rank))

    def to_json(self) -> str:
        def cplx(a):
            return {"real": np.asarray(a).real.tolist(), "imag": np.asarray(a).imag.tolist()}

        return json.dumps({
            "e_s": cplx(self.e_s),
            "e_v": cplx(self.e_v),
            "eigenvalues": self.eigenvalues.tolist(),
            "noise_level": self.noise_level,
            "weights": self.weights.tolist(),
            "n_snapshots": self.n_snapshots,
        })

    @classmethod
    def from_json(cls, text: str) -> "SubspaceEstimate":
        d = json.loads(text)

        def cplx(x):
            return np.asarray(x["real"]) + 1j * np.asarray(x["imag"])

        m = len(d["eigenvalues"])
        e_s = cplx(d["e_s"]).reshape(m, -1)
        e_v = cplx(d["e_v"]).reshape(m, -1)
        return cls(e_s, e_v, np.asarray(d["eigenvalues"]), float(d["noise_level"]),
                   np.asarray(d["weights"]), int(d["n_snapshots"]))


@dataclass(frozen=True)
class WsfResidualModel:
    """i.i.d. circular WSF residual entries of variance ``1/N``."""

    variance: float
    shape: tuple

    def __post_init__(self):
        if not self.variance > 0:
            raise SubspaceError("residual variance must be positive")


def sample_covariance(batch: SnapshotBatch | np.ndarray) -> np.ndarray:
    x = batch.data if isinstance(batch, SnapshotBatch) else np.asarray(batch)
    r = x @ x.conj().T / x.shape[1]
    return 0.5 * (r + r.conj().T)


def subspace_weights(eigenvalues, noise_level, n_sensors, rank, n_snapshots) -> np.ndarray:
    """Finite-sample optimal signal eigenvector weights (diagonal, K x K).

    ``W(k,k) = sqrt((l_k - l_v)^2 / (l_k l_v) + (M - K) / N)``.
    """
    if not noise_level > 0:
        raise DegenerateNoiseError("noise level must be positive")
    lam = np.asarray(eigenvalues, dtype=float)[:rank]
    w = np.sqrt((lam - noise_level) ** 2 / (lam * noise_level) + (n_sensors - rank) / n_snapshots)
    return np.diag(w)


def whiten_and_eig(rxx: np.ndarray, noise: NoiseModel, rank: int, n_snapshots: int) -> SubspaceEstimate:
    """Eigen-decompose the whitened covariance and split at ``rank``."""
    m = rxx.shape[0]
    if not 1 <= rank <= m - 1:
        raise InvalidRankError(f"rank must lie in [1, {m - 1}], got {rank}")
    wh = noise.whitener
    sxx = rxx if noise.is_white else wh @ rxx @ wh
    sxx = 0.5 * (sxx + sxx.conj().T)
    lam, vec = np.linalg.eigh(sxx)
    lam, vec = lam[::-1], vec[:, ::-1]
    if lam[-1] < -1e-8 * max(lam[0], 0.0):
        raise CovarianceError("covariance is not positive semidefinite")
    vec = _fix_phase(vec)
    noise_level = float(lam[rank:].mean())
    w = np.diag(subspace_weights(lam, noise_level, m, rank, n_snapshots))
    return SubspaceEstimate(vec[:, :rank], vec[:, rank:], lam, noise_level, w, n_snapshots)


def estimate_rank(eigenvalues, n_sensors: int, n_snapshots: int, criterion: str = "aic") -> int:
    """Classical information-criterion estimate of the covariance rank.

    Returns 0 when no dominant subspace is detected.
    """
    lam = np.clip(np.sort(np.asarray(eigenvalues, dtype=float))[::-1], 1e-300, None)
    m, n = n_sensors, n_snapshots
    scores = []
    for k in range(m):
        tail = lam[k:]
        log_ratio = np.mean(np.log(tail)) - np.log(np.mean(tail))
        fit = -n * (m - k) * log_ratio
        if criterion == "aic":
            penalty = k * (2 * m - k)
        elif criterion == "mdl":
            penalty = 0.5 * k * (2 * m - k) * np.log(n)
        else:
            raise ValueError(f"unknown rank criterion {criterion!r}")
        scores.append(2.0 * fit + 2.0 * penalty if criterion == "aic" else fit + penalty)
    return int(np.argmin(scores))


def subspace_from_snapshots(batch: SnapshotBatch, noise: NoiseModel, rank: int | None = None,
                            criterion: str = "aic"):
    """Convenience: covariance, optional rank estimate, eigen-split.

    Returns ``(subspace, rank)``; ``subspace`` is None when the estimated rank is 0.
    """
    rxx = sample_covariance(batch)
    if rank is None:
        wh = noise.whitener
        sxx = rxx if noise.is_white else wh @ rxx @ wh
        lam = np.linalg.eigvalsh(0.5 * (sxx + sxx.conj().T))
        rank = estimate_rank(lam, batch.n_sensors, batch.n_snapshots, criterion)
        if rank == 0:
            return None, 0
    return whiten_and_eig(rxx, noise, rank, batch.n_snapshots), rank
