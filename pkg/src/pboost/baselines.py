"""Reference estimators: spectral MUSIC, OMP on the WSF residual, FOCUSS/MAP-SBS
iterations and a robust minimum-variance beamformer."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .array_model import SnapshotBatch, SteeringCodebook
from .subspace import SubspaceEstimate

__all__ = [
    "SparseSolverState",
    "BeamformerSpectrum",
    "spectral_music",
    "omp_wsf",
    "min_norm_init",
    "focuss_map_step",
    "focuss_solve",
    "ledoit_wolf_shrinkage",
    "robust_mv_beamformer",
]

MUSIC_CAP = 1e15
FOCUSS_MAX_ITER = 200


def spectral_music(subspace: SubspaceEstimate, codebook: SteeringCodebook) -> np.ndarray:
    """``||b_q||^2 / ||E_v^H b_q||^2`` over the codebook, capped at 1e15."""
    b = codebook.columns
    num = np.sum(np.abs(b) ** 2, axis=0)
    den = np.sum(np.abs(subspace.e_v.conj().T @ b) ** 2, axis=0)
    with np.errstate(divide="ignore"):
        out = np.where(den > num / MUSIC_CAP, num / np.where(den > 0, den, 1.0), MUSIC_CAP)
    return out


def omp_wsf(subspace: SubspaceEstimate, codebook: SteeringCodebook, n_sources: int):
    """Greedy selection of ``n_sources`` columns minimizing ``||E_s W - B_sel S||_F``.

    Each step adds the column with the smallest residual after a full LS refit
    (orthogonal least squares).  Returns ``(indices, mixing, residual_history)``.
    """
    m = codebook.n_sensors
    if not 0 <= n_sources < m:
        raise ValueError(f"n_sources must lie in [0, {m - 1}]")
    target = subspace.weighted_signal
    b = codebook.columns
    g = b.copy()
    norms = np.sum(np.abs(g) ** 2, axis=0)
    norms0 = norms.copy()
    r = target.copy()
    history = [float(np.linalg.norm(r) ** 2)]
    chosen: list[int] = []
    for _ in range(n_sources):
        corr = g.conj().T @ r
        usable = norms > 1e-12 * norms0
        usable[chosen] = False
        score = np.where(usable, np.sum(np.abs(corr) ** 2, axis=1) / np.where(usable, norms, 1.0), -1.0)
        j = int(score.argmax())
        u = g[:, j] / np.sqrt(norms[j])
        r = r - np.outer(u, u.conj() @ r)
        alpha = u.conj() @ g
        g = g - np.outer(u, alpha)
        norms = norms - np.abs(alpha) ** 2
        chosen.append(j)
        history.append(float(np.linalg.norm(r) ** 2))
    if chosen:
        mixing, *_ = np.linalg.lstsq(b[:, chosen], target, rcond=None)
    else:
        mixing = np.zeros((0, subspace.rank), dtype=complex)
    return np.array(chosen, dtype=int), mixing, np.array(history)


@dataclass(frozen=True, eq=False)
class SparseSolverState:
    """FOCUSS iterate: solution ``s`` (Q x K) and its amplitude prior ``d_s``."""

    s: np.ndarray | None
    d_s: np.ndarray
    iteration: int = 0
    rel_change: float = np.inf
    converged: bool = False
    empty: bool = False

    def __post_init__(self):
        if np.any(np.asarray(self.d_s) < 0):
            raise ValueError("amplitude prior must be nonnegative")

    @classmethod
    def from_prior(cls, d_s) -> "SparseSolverState":
        d = np.asarray(d_s, dtype=float).copy()
        return cls(None, d, empty=not np.any(d > 0))

    @property
    def amplitudes(self) -> np.ndarray:
        return self.d_s


def _row_amplitudes(s: np.ndarray) -> np.ndarray:
    return np.linalg.norm(s, axis=1) / np.sqrt(s.shape[1])


def min_norm_init(codebook: SteeringCodebook, subspace: SubspaceEstimate) -> np.ndarray:
    """Row amplitudes of the minimum-norm solution of ``B S = E_s W``."""
    s = np.linalg.pinv(codebook.columns) @ subspace.weighted_signal
    return _row_amplitudes(s)


def focuss_map_step(state: SparseSolverState, codebook: SteeringCodebook, subspace: SubspaceEstimate,
                    regularizer: float | None = None) -> SparseSolverState:
    """One MAP-SBS iteration through the SVD of ``D_S B^H``.

    ``regularizer`` defaults to ``1/N``; zero gives the classical FOCUSS step.
    Rows whose prior is below ``1e-12 * max`` stay frozen at zero.
    """
    if state.empty:
        return state
    reg = 1.0 / subspace.n_snapshots if regularizer is None else float(regularizer)
    d = np.asarray(state.d_s, dtype=float)
    dmax = d.max(initial=0.0)
    if not dmax > 0:
        return replace(state, empty=True)
    d = np.where(d < 1e-12 * dmax, 0.0, d)
    b = codebook.columns
    u, sig, vh = np.linalg.svd(d[:, None] * b.conj().T, full_matrices=False)
    keep = sig > 1e-13 * sig[0]
    u, sig, vh = u[:, keep], sig[keep], vh[keep]
    gain = sig / (sig ** 2 + reg)
    s = d[:, None] * (u * gain) @ (vh @ subspace.weighted_signal)
    d_new = _row_amplitudes(s)
    if state.s is None:
        rel = np.inf
    else:
        rel = float(np.linalg.norm(s - state.s) / max(np.linalg.norm(s), 1e-300))
    return SparseSolverState(s, d_new, state.iteration + 1, rel, False, not np.any(d_new > 0))


def focuss_solve(init_d_s, codebook: SteeringCodebook, subspace: SubspaceEstimate, tol: float = 1e-7,
                 max_iter: int = FOCUSS_MAX_ITER, regularizer: float | None = None) -> SparseSolverState:
    """Iterate :func:`focuss_map_step` until ``||S_new - S|| / ||S_new||`` drops below ``tol``.

    The returned state has ``converged=False`` when ``max_iter`` was hit and
    ``empty=True`` for a vanishing prior.
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    state = SparseSolverState.from_prior(init_d_s)
    while not state.empty and state.iteration < max_iter:
        state = focuss_map_step(state, codebook, subspace, regularizer)
        if state.rel_change < tol:
            return replace(state, converged=True)
    return state


# ---------------------------------------------------------------------------
# Robust MV beamformer


def ledoit_wolf_shrinkage(x: np.ndarray):
    """Shrink the sample covariance of columns ``x`` toward a scaled identity.

    Returns ``(shrunk_covariance, rho)`` with the analytic small-sample rule
    for the shrinkage intensity ``rho`` (complex data).
    """
    m, n = x.shape
    s = x @ x.conj().T / n
    s = 0.5 * (s + s.conj().T)
    mu = float(np.real(np.trace(s))) / m
    target = mu * np.eye(m)
    delta = float(np.linalg.norm(s - target) ** 2)
    # mean of ||x_n x_n^H - S||_F^2 over snapshots, without forming the outer products
    pw = np.sum(np.abs(x) ** 2, axis=0)
    quad = np.real(np.einsum("in,ij,jn->n", x.conj(), s, x))
    spread = pw ** 2 - 2 * quad + float(np.linalg.norm(s) ** 2)
    beta = float(np.clip(spread.sum() / n ** 2, 0.0, delta))
    rho = beta / delta if delta > 0 else 1.0
    return rho * target + (1 - rho) * s, rho


@dataclass(frozen=True, eq=False)
class BeamformerSpectrum:
    power: np.ndarray
    weight_norm: np.ndarray
    loading: np.ndarray
    response: np.ndarray        # w^H b / ||b|| at each steering angle
    infeasible: np.ndarray
    shrinkage: float


def _solve_vec(a, f):
    # batched a^-1 f for a single right-hand side
    rhs = np.broadcast_to(f, a.shape[:2])[..., None]
    return np.linalg.solve(a, rhs)[..., 0]


def _lcmv(lam, uc, f):
    """LCMV weights in the eigenbasis: ``(L^-1 C)(C^H L^-1 C)^-1 f`` for a batch of angles."""
    inv = 1.0 / lam                                   # (nd, M)
    lc = inv[:, :, None] * uc                          # (nd, M, J)
    gram = np.einsum("qmi,qmj->qij", uc.conj(), lc)
    coef = _solve_vec(gram, f)
    return np.einsum("qmj,qj->qm", lc, coef)


def robust_mv_beamformer(data, codebook: SteeringCodebook, max_norm: float = np.sqrt(2.0),
                         zero_gradient: bool = True, shrinkage: float | None = None) -> BeamformerSpectrum:
    """Distortionless MV power spectrum with shrinkage, zero-gradient constraint and norm cap.

    ``data`` is a :class:`SnapshotBatch` (or raw M x N snapshots) in sensor
    units; it is whitened with the codebook noise model.  The column ``b/||b||``
    is kept distortionless, its angular gradient is nulled, and the weight norm
    is capped at ``max_norm`` by bisection on a diagonal loading level.
    ``max_norm=None`` disables the cap.  Passing a covariance array together
    with ``shrinkage`` skips the shrinkage estimate.
    """
    x = data.data if isinstance(data, SnapshotBatch) else np.asarray(data)
    if shrinkage is None:
        xw = codebook.noise.whiten(x)
        sample = xw @ xw.conj().T / xw.shape[1]
        sample = 0.5 * (sample + sample.conj().T)
        rs, rho = ledoit_wolf_shrinkage(xw)
    else:
        wh = codebook.noise.whitener
        sample = x if codebook.noise.is_white else wh @ x @ wh
        sample = 0.5 * (sample + sample.conj().T)
        rho = float(shrinkage)
        mu = float(np.real(np.trace(sample))) / sample.shape[0]
        rs = rho * mu * np.eye(sample.shape[0]) + (1 - rho) * sample

    b = codebook.columns
    bn = b / np.linalg.norm(b, axis=0)
    cols = [bn]
    if zero_gradient:
        g = codebook.gradients
        gn = np.linalg.norm(g, axis=0)
        cols.append(g / np.where(gn > 0, gn, 1.0))
    c = np.stack(cols, axis=-1).transpose(1, 0, 2)            # (Q, M, J)
    f = np.zeros(c.shape[2], dtype=complex)
    f[0] = 1.0
    lam, u = np.linalg.eigh(rs)
    lam = np.clip(lam, 1e-300, None)
    uc = np.einsum("mi,qmj->qij", u.conj(), c)

    q = c.shape[0]
    infeasible = np.linalg.matrix_rank(c, tol=1e-10) < c.shape[2]
    loading = np.zeros(q)

    def norms_at(delta, idx):
        w = _lcmv(lam[None, :] + delta[:, None], uc[idx], f)
        return np.linalg.norm(w, axis=1), w

    ok = ~infeasible
    idx = np.flatnonzero(ok)
    # the norm floor of an LCMV solution is ||C (C^H C)^-1 f||
    floor = np.linalg.norm(np.einsum("qmj,qj->qm", c[idx], _solve_vec(
        np.einsum("qmi,qmj->qij", c[idx].conj(), c[idx]), f)), axis=1)
    if max_norm is not None:
        infeasible[idx[floor > max_norm + 1e-12]] = True
        idx = np.flatnonzero(~infeasible)
    wq = np.zeros((q, codebook.n_sensors), dtype=complex)
    if idx.size:
        nrm, w = norms_at(np.zeros(idx.size), idx)
        if max_norm is not None:
            over = nrm > max_norm
            if over.any():
                sub = idx[over]
                scale = float(lam.max())
                lo = np.zeros(sub.size)
                hi = np.full(sub.size, scale)
                while True:
                    n_hi, _ = norms_at(hi, sub)
                    grow = n_hi > max_norm
                    if not grow.any():
                        break
                    hi = np.where(grow, hi * 10.0, hi)
                for _ in range(100):
                    mid = 0.5 * (lo + hi)
                    n_mid, _ = norms_at(mid, sub)
                    hit = n_mid > max_norm
                    lo = np.where(hit, mid, lo)
                    hi = np.where(hit, hi, mid)
                    if np.all(hi - lo <= 1e-12 * np.maximum(hi, 1e-300)):
                        break
                _, w_sub = norms_at(hi, sub)
                w[over] = w_sub
                loading[sub] = hi
        wq[idx] = np.einsum("mi,qi->qm", u, w)

    power = np.real(np.einsum("qm,mn,qn->q", wq.conj(), sample, wq))
    power = np.where(infeasible, 0.0, np.clip(power, 0.0, None))
    response = np.einsum("qm,mq->q", wq.conj(), bn)
    return BeamformerSpectrum(power, np.linalg.norm(wq, axis=1), loading, response, infeasible, float(rho))
