"""The three-step parallel booster.

Step 1 builds one composite steering vector (CSV) per codebook anchor by
orthogonal matching pursuit on the noise-subspace fitting variance, and weights
it with a minimum-variance beamformer power.  Step 2 combines the weighted CSVs
with the minimum-norm ML-MUSIC fit.  Step 3 turns the combination into a
smoothed pseudo-covariance, cleans it with a generalized-SVD partition against
the noise projector, and evaluates a Capon-like spectrum on the weighted signal
subspace.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .array_model import SnapshotBatch, SteeringCodebook
from .subspace import SubspaceEstimate, subspace_from_snapshots

__all__ = [
    "PBoostError",
    "EmptySignalError",
    "PBoostStageError",
    "CsvEntry",
    "CsvBank",
    "MlMusicSolution",
    "PseudoCovariance",
    "SpectrumEstimate",
    "PBoostConfig",
    "PBoostDiagnostics",
    "build_csv_bank",
    "md_music_csv",
    "beta_weight",
    "ml_music_solve",
    "smoothed_pseudocov",
    "gsvd_partition",
    "denoise_rq",
    "spectrum_at",
    "pboost_spectrum",
    "run_pboost",
]


class PBoostError(RuntimeError):
    pass


class EmptySignalError(PBoostError):
    """No CSV carries signal energy."""


class PBoostStageError(PBoostError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"{stage}: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass(frozen=True, eq=False)
class CsvEntry:
    """Composite steering vector anchored at grid index ``anchor_index``."""

    anchor_index: int
    coefficients: np.ndarray
    csv: np.ndarray
    residual_variance: float
    selected_indices: tuple
    beta_sq: float
    sigma_history: tuple = ()


@dataclass(frozen=True, eq=False)
class CsvBank:
    """All Q CSVs in array form (column q belongs to anchor q)."""

    coefficients: np.ndarray   # Q x Q, column q is s_q
    csvs: np.ndarray           # M x Q, column q is B s_q
    residual_variance: np.ndarray
    beta_sq: np.ndarray
    selected: tuple            # per-anchor tuple of selected grid indices
    sigma_history: tuple
    omp_cmac: int = 0

    @property
    def size(self) -> int:
        return self.csvs.shape[1]

    def entry(self, q: int) -> CsvEntry:
        return CsvEntry(q, self.coefficients[:, q], self.csvs[:, q], float(self.residual_variance[q]),
                        self.selected[q], float(self.beta_sq[q]), self.sigma_history[q])


@dataclass(frozen=True, eq=False)
class MlMusicSolution:
    c_hat: np.ndarray
    y: np.ndarray
    s_ml: np.ndarray
    t_ss: np.ndarray
    t_vv: np.ndarray
    rayleigh_values: np.ndarray
    rank: int
    residual: np.ndarray       # Eq-system residual, M x K


@dataclass(frozen=True, eq=False)
class PseudoCovariance:
    r_ss: np.ndarray
    d_s: np.ndarray
    r_q_raw: np.ndarray
    r_q: np.ndarray
    gsvd_f: np.ndarray
    lambda_ss: np.ndarray
    lambda_vv: np.ndarray
    lambda_q: np.ndarray
    regularized: bool = False


@dataclass(frozen=True, eq=False)
class SpectrumEstimate:
    rows: np.ndarray
    amplitudes: np.ndarray
    grid: np.ndarray
    undefined: np.ndarray = None

    def __post_init__(self):
        if self.undefined is None:
            object.__setattr__(self, "undefined", np.zeros(self.amplitudes.shape, dtype=bool))


@dataclass(frozen=True)
class PBoostConfig:
    max_support: int | None = None   # None -> M - K - 1
    stop_tol: float = 1e-6
    sector_deg: float | None = None
    workers: int = 1
    block_size: int = 64             # fixed so results do not depend on `workers`
    rank: int | None = None          # used only when snapshots are passed in
    rank_criterion: str = "aic"


@dataclass(eq=False)
class PBoostDiagnostics:
    timings: dict = field(default_factory=dict)
    counters: dict = field(default_factory=dict)
    subspace: SubspaceEstimate | None = None
    bank: CsvBank | None = None
    ml: MlMusicSolution | None = None
    pcov: PseudoCovariance | None = None


# ---------------------------------------------------------------------------
# Step 1

_ZERO_RESIDUAL = 1e-20   # relative residual power treated as an exact fit


def _omp_block(anchors, v, rho, grid, n_snap, max_support, stop_tol, sector_deg):
    """Batched OMP over a block of anchors.

    ``v`` is E_v^H B (L x Q); ``rho[q, j] = B_q^H B_j / ||B_q||^2``.  For anchor
    q the candidate j enters through its component orthogonal to B_q, whose
    noise-domain image is ``v_j - v_q rho[q, j]``.
    """
    nb = len(anchors)
    l, q_total = v.shape
    vq = v[:, anchors].T                                       # nb x L
    g0 = v[None, :, :] - vq[:, :, None] * rho[anchors][:, None, :]
    valid = np.ones((nb, q_total), dtype=bool)
    valid[np.arange(nb), anchors] = False
    if sector_deg is not None:
        valid &= np.abs(grid[None, :] - grid[anchors][:, None]) <= sector_deg
    g = g0.copy()
    norms0 = np.sum(np.abs(g0) ** 2, axis=1)
    norms = norms0.copy()
    r = vq.copy()
    rnorm0 = np.sum(np.abs(r) ** 2, axis=1)
    active = np.ones(nb, dtype=bool)
    chosen = [[] for _ in range(nb)]
    scale = n_snap / l
    history = [[scale * float(np.vdot(r[i], r[i]).real)] for i in range(nb)]
    cmac = nb * l * q_total
    rows = np.arange(nb)

    for _ in range(max_support):
        if not active.any():
            break
        corr = np.einsum("alq,al->aq", g.conj(), r)
        usable = valid & (norms > 1e-12 * np.maximum(norms0, 1e-300))
        score = np.where(usable, np.abs(corr) ** 2 / np.where(usable, norms, 1.0), -1.0)
        j = score.argmax(axis=1)
        best = score[rows, j]
        rnorm = np.sum(np.abs(r) ** 2, axis=1)
        # a residual at round-off level has nothing left to fit
        active &= (best > 0) & (best >= stop_tol * rnorm) & (rnorm > _ZERO_RESIDUAL * rnorm0)
        if not active.any():
            break
        cmac += int(active.sum()) * (3 * l * q_total + q_total)
        u = g[rows, :, j] / np.sqrt(np.where(active, norms[rows, j], 1.0))[:, None]
        u[~active] = 0.0
        r = r - u * np.einsum("al,al->a", u.conj(), r)[:, None]
        alpha = np.einsum("al,alq->aq", u.conj(), g)
        g = g - u[:, :, None] * alpha[:, None, :]
        norms = np.where(active[:, None], norms - np.abs(alpha) ** 2, norms)
        valid[rows[active], j[active]] = False
        for i in np.flatnonzero(active):
            chosen[i].append(int(j[i]))
            history[i].append(scale * float(np.vdot(r[i], r[i]).real))

    coeffs = []
    for i in range(nb):
        sel = chosen[i]
        if sel:
            c, *_ = np.linalg.lstsq(g0[i][:, sel], -vq[i], rcond=None)
        else:
            c = np.zeros(0, dtype=complex)
        coeffs.append(c)
    return chosen, coeffs, history, cmac


def build_csv_bank(codebook: SteeringCodebook, subspace: SubspaceEstimate, max_support=None,
                   stop_tol=1e-6, sector_deg=None, workers=1, block_size=64, anchors=None) -> CsvBank:
    """Step 1 for every anchor (or the given subset), mapped over fixed blocks."""
    b = codebook.columns
    m, q_total = b.shape
    k = subspace.rank
    l = m - k
    cap = max(l - 1, 0)
    max_support = cap if max_support is None else min(max_support, cap)
    anchors = np.arange(q_total) if anchors is None else np.asarray(anchors, dtype=int)
    v = subspace.e_v.conj().T @ b
    gram = b.conj().T @ b
    rho = gram / np.real(np.diag(gram))[:, None]
    blocks = [anchors[i:i + block_size] for i in range(0, anchors.size, block_size)]

    def run(block):
        return _omp_block(block, v, rho, codebook.grid, subspace.n_snapshots, max_support, stop_tol, sector_deg)

    if workers > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, blocks))
    else:
        results = [run(blk) for blk in blocks]

    coef = np.zeros((q_total, anchors.size), dtype=complex)
    selected, history = [], []
    cmac = 0
    col = 0
    for block, (chosen, coeffs, hist, c) in zip(blocks, results):
        cmac += c
        for i, q in enumerate(block):
            sel = chosen[i]
            cq = coeffs[i]
            coef[q, col] = 1.0 - (np.sum(cq * rho[q, sel]) if sel else 0.0)
            if sel:
                coef[sel, col] += cq
            selected.append(tuple(sel))
            history.append(tuple(hist[i]))
            col += 1
    csvs = b @ coef
    resid = subspace.n_snapshots / l * np.sum(np.abs(subspace.e_v.conj().T @ csvs) ** 2, axis=0)
    beta = beta_weight(csvs, subspace)
    return CsvBank(coef, csvs, resid, beta, tuple(selected), tuple(history), cmac)


def md_music_csv(codebook: SteeringCodebook, subspace: SubspaceEstimate, anchor_q: int, max_support=None,
                 stop_tol=1e-6, sector_deg=None) -> CsvEntry:
    """CSV for a single anchor (MD-MUSIC by OMP on the NSF variance)."""
    if not 0 <= anchor_q < codebook.size:
        raise IndexError(f"anchor {anchor_q} outside codebook of size {codebook.size}")
    if max_support is not None and max_support > subspace.n_sensors - subspace.rank - 1:
        raise ValueError("max_support may not exceed M - K - 1")
    bank = build_csv_bank(codebook, subspace, max_support, stop_tol, sector_deg, anchors=[anchor_q])
    return CsvEntry(anchor_q, bank.coefficients[:, 0], bank.csvs[:, 0], float(bank.residual_variance[0]),
                    bank.selected[0], float(bank.beta_sq[0]), bank.sigma_history[0])


def beta_weight(csv, subspace: SubspaceEstimate):
    """Minimum-variance power of the CSV(s) against the weighted signal subspace.

    ``beta^2 = b^H E_s W^-2 E_s^H b / [b^H (E_s W^-2 E_s^H + (N/K) E_v E_v^H) b]^2``.
    Accepts an M-vector, an (M, Q) array or a :class:`CsvEntry`.
    """
    if isinstance(csv, CsvEntry):
        csv = csv.csv
    bq = np.asarray(csv)
    single = bq.ndim == 1
    if single:
        bq = bq[:, None]
    ps = subspace.e_s.conj().T @ bq
    pv = subspace.e_v.conj().T @ bq
    num = np.sum(np.abs(ps) ** 2 / subspace.weights[:, None] ** 2, axis=0)
    den = num + subspace.n_snapshots / subspace.rank * np.sum(np.abs(pv) ** 2, axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        beta = np.where(den > 0, num / den ** 2, 0.0)
    return float(beta[0]) if single else beta


# ---------------------------------------------------------------------------
# Step 2


def ml_music_solve(bank: CsvBank, subspace: SubspaceEstimate, cutoff: float = 1e-10) -> MlMusicSolution:
    """Minimum-norm solution of the stacked signal/noise ML-MUSIC system."""
    if isinstance(bank, (list, tuple)):
        bank = _bank_from_entries(bank)
    k = subspace.rank
    beta = np.clip(bank.beta_sq, 0.0, None)
    if np.count_nonzero(beta > 0) == 0:
        raise EmptySignalError("all CSV weights vanish")
    if np.count_nonzero(beta > 0) < k:
        raise EmptySignalError(f"fewer than K={k} CSVs carry energy")
    sb = np.sqrt(beta)
    bc = bank.csvs * sb[None, :]
    top = (subspace.e_s.conj().T @ bc) / subspace.weights[:, None]
    bottom = subspace.e_v.conj().T @ bc
    a = np.vstack([top, bottom])
    rhs = np.zeros((a.shape[0], k), dtype=complex)
    rhs[:k, :k] = np.eye(k)
    u, s, vh = np.linalg.svd(a, full_matrices=False)
    keep = s > cutoff * s[0]
    y = (vh[keep].conj().T / s[keep]) @ (u[:, keep].conj().T @ rhs)
    c_hat = bank.coefficients * sb[None, :]
    s_ml = c_hat @ y
    t_ss = top.conj().T @ top
    t_vv = bottom.conj().T @ bottom
    num = np.real(np.einsum("qk,qp,pk->k", y.conj(), t_vv, y))
    den = np.real(np.einsum("qk,qp,pk->k", y.conj(), t_ss, y))
    with np.errstate(invalid="ignore", divide="ignore"):
        rayleigh = np.where(den > 0, num / den, np.inf)
    return MlMusicSolution(c_hat, y, s_ml, t_ss, t_vv, rayleigh, k, a @ y - rhs)


def _bank_from_entries(entries) -> CsvBank:
    entries = sorted(entries, key=lambda e: e.anchor_index)
    coef = np.column_stack([e.coefficients for e in entries])
    csvs = np.column_stack([e.csv for e in entries])
    return CsvBank(coef, csvs, np.array([e.residual_variance for e in entries]),
                   np.array([e.beta_sq for e in entries]), tuple(e.selected_indices for e in entries),
                   tuple(e.sigma_history for e in entries))


# ---------------------------------------------------------------------------
# Step 3


def smoothed_pseudocov(s_ml: np.ndarray, codebook: SteeringCodebook, rank: int | None = None,
                       floor: float = 1e-12):
    """Diagonal-prior pseudo-covariance ``R_ss = B diag(d^2) B^H``.

    ``d_q = ||S(q, :)|| / sqrt(K)``; entries below ``floor * max(d)`` are zeroed.
    Returns ``(r_ss, d_s)``.
    """
    s_ml = np.asarray(s_ml)
    k = s_ml.shape[1] if rank is None else rank
    d = np.linalg.norm(s_ml, axis=1) / np.sqrt(k)
    if d.max(initial=0.0) > 0:
        d = np.where(d < floor * d.max(), 0.0, d)
    b = codebook.columns
    r_ss = (b * d ** 2) @ b.conj().T
    return 0.5 * (r_ss + r_ss.conj().T), d


def gsvd_partition(a: np.ndarray, b: np.ndarray):
    """Joint factorization ``a = F La F^H``, ``b = F Lb F^H`` with ``La + Lb = I``.

    Computed as the eigendecomposition of ``a`` whitened by ``(a + b)^(1/2)``.
    A singular sum is regularized by ``1e-12 * trace`` on the diagonal.
    Returns ``(F, la, lb, regularized)``.
    """
    s = a + b
    s = 0.5 * (s + s.conj().T)
    tr = float(np.real(np.trace(s)))
    w, v = np.linalg.eigh(s)
    regularized = bool(w.min() < 1e-14 * tr)
    if regularized:
        w = w + 1e-12 * tr
    root = (v * np.sqrt(w)) @ v.conj().T
    iroot = (v / np.sqrt(w)) @ v.conj().T
    mq = iroot @ a @ iroot
    la, u = np.linalg.eigh(0.5 * (mq + mq.conj().T))
    la = np.clip(la, 0.0, 1.0)
    return root @ u, la, 1.0 - la, regularized


def denoise_rq(r_ss: np.ndarray, subspace: SubspaceEstimate, d_s=None) -> PseudoCovariance:
    """GSVD cleaning of ``R_Q = R_ss + N^-1 E_v E_v^H``: keep the larger part per component."""
    nv = (subspace.e_v @ subspace.e_v.conj().T) / subspace.n_snapshots
    f, lss, lvv, reg = gsvd_partition(r_ss, nv)
    lq = np.maximum(lss, lvv)
    r_q = (f * lq) @ f.conj().T
    r_q = 0.5 * (r_q + r_q.conj().T)
    d_s = np.zeros(0) if d_s is None else d_s
    return PseudoCovariance(r_ss, d_s, r_ss + nv, r_q, f, lss, lvv, lq, reg)


def spectrum_at(r_q: np.ndarray, steering: np.ndarray, subspace: SubspaceEstimate):
    """Capon-type BLUE rows ``b^H R^-1 E_s W / (b^H R^-1 b)`` for arbitrary columns.

    Returns ``(rows, amplitudes, undefined)``.
    """
    chol = sla.cho_factor(r_q, lower=True)
    z = sla.cho_solve(chol, steering)
    den = np.real(np.sum(steering.conj() * z, axis=0))
    num = z.conj().T @ subspace.weighted_signal
    inv_norm = 1.0 / np.linalg.eigvalsh(r_q).min()
    undefined = den < 1e-14 * np.sum(np.abs(steering) ** 2, axis=0) * inv_norm
    rows = num / np.where(undefined, 1.0, den)[:, None]
    rows[undefined] = 0.0
    amp = np.linalg.norm(rows, axis=1) / np.sqrt(subspace.rank)
    return rows, amp, undefined


def pboost_spectrum(pcov: PseudoCovariance, codebook: SteeringCodebook, subspace: SubspaceEstimate) -> SpectrumEstimate:
    rows, amp, undefined = spectrum_at(pcov.r_q, codebook.columns, subspace)
    return SpectrumEstimate(rows, amp, codebook.grid, undefined)


# ---------------------------------------------------------------------------
# Orchestration


def run_pboost(batch_or_subspace, codebook: SteeringCodebook, config: PBoostConfig = PBoostConfig()):
    """Run Steps 1-3; returns ``(SpectrumEstimate, PBoostDiagnostics)``.

    Step 1 is mapped over fixed-size anchor blocks on ``config.workers``
    threads; the output does not depend on the worker count.
    """
    diag = PBoostDiagnostics()
    if isinstance(batch_or_subspace, SnapshotBatch):
        subspace, rank = subspace_from_snapshots(batch_or_subspace, codebook.noise, config.rank,
                                                 config.rank_criterion)
        if subspace is None:
            raise PBoostStageError("subspace", EmptySignalError("estimated signal rank is 0"))
    else:
        subspace = batch_or_subspace
    diag.subspace = subspace
    m, k, q = codebook.n_sensors, subspace.rank, codebook.size

    def stage(name, fn):
        t0 = time.perf_counter()
        try:
            out = fn()
        except PBoostStageError:
            raise
        except Exception as exc:  # attribute the failure to its stage
            raise PBoostStageError(name, exc) from exc
        diag.timings[name] = time.perf_counter() - t0
        return out

    bank = stage("step1_csv", lambda: build_csv_bank(
        codebook, subspace, config.max_support, config.stop_tol, config.sector_deg,
        config.workers, config.block_size))
    ml = stage("step2_ml_music", lambda: ml_music_solve(bank, subspace))

    def step3():
        r_ss, d = smoothed_pseudocov(ml.s_ml, codebook, k)
        pcov = denoise_rq(r_ss, subspace, d)
        return pcov, pboost_spectrum(pcov, codebook, subspace)

    pcov, spec = stage("step3_spectrum", step3)
    diag.bank, diag.ml, diag.pcov = bank, ml, pcov
    diag.counters = {
        "omp_cmac": int(bank.omp_cmac),
        "omp_bulk_model": int(4 * q * q * (m - k) ** 2),
        "support_mean": float(np.mean([len(s) for s in bank.selected])),
        "step2_flops_model": int(3 * m * m * q + 2 * q * m * m),
        "step3_flops_model": int(3 * m * q * q + q * m * m),
        "rq_regularized": int(pcov.regularized),
        "undefined_points": int(spec.undefined.sum()),
    }
    return spec, diag
