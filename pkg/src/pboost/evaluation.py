"""Pairing of estimates to true paths, success and RMSE statistics, and the
Monte-Carlo driver for estimator chains."""

from __future__ import annotations

import hashlib
import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy.optimize import linear_sum_assignment
from threadpoolctl import threadpool_limits

from .array_model import (ArrayGeometry, MaternParams, NoiseModel, build_codebook, fixed_scenario,
                          generate_matern_scenario, synthesize_snapshots, uniform_grid)
from .baselines import focuss_solve, min_norm_init, omp_wsf, robust_mv_beamformer, spectral_music
from .core import PBoostConfig, run_pboost, spectrum_at
from .detection import aic_validate, find_peaks
from .subspace import subspace_from_snapshots

__all__ = [
    "PairingResult",
    "TrialReport",
    "AggregateReport",
    "ExperimentConfig",
    "EvaluationError",
    "ESTIMATORS",
    "parse_chains",
    "pair_doas",
    "compute_metrics",
    "trial_seed",
    "run_trial",
    "run_stages",
    "ExperimentContext",
    "MonteCarloResult",
    "chain_labels",
    "draw_scenario",
    "REPORT_COLUMNS",
    "run_monte_carlo",
    "report_rows",
]

DEFAULT_THRESHOLD_DEG = 7.0
FIXED_DOAS = (8.0, 13.0, 33.0, 37.0)
FAMILIES = ("uncorrelated", "coherent", "matern")
# stages producing an amplitude spectrum; "aic" consumes one, "omp-wsf" stands alone
SPECTRAL = ("pboost", "music", "mvdr", "l2", "focuss", "sbs-map")
ESTIMATORS = SPECTRAL + ("omp-wsf", "aic")


class EvaluationError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Pairing and metrics


@dataclass(frozen=True, eq=False)
class PairingResult:
    """Assignment of each true path to an estimate index, or ``-1`` for a miss.

    ``errors_deg`` holds the absolute error of every paired path (NaN for
    misses); a path succeeds when it is paired below the threshold.
    """

    assignment: np.ndarray
    errors_deg: np.ndarray
    failures: int
    cost: float
    threshold_deg: float

    @property
    def successes(self) -> int:
        return int(self.assignment.size - self.failures)

    @property
    def paired_errors(self) -> np.ndarray:
        return self.errors_deg[self.assignment >= 0]


def _pair_cost(estimates, truth, threshold):
    """Rectangular cost: real columns then one private miss column per truth."""
    n_t, n_e = truth.size, estimates.size
    err = np.abs(truth[:, None] - estimates[None, :])
    forbidden = threshold ** 2 * (1.0 + 1e-9) + 1.0
    real = np.where(err < threshold, err ** 2, forbidden)
    miss = np.full((n_t, n_t), forbidden)
    np.fill_diagonal(miss, threshold ** 2)
    return np.hstack([real, miss]), err


def pair_doas(estimates, truth, threshold_deg: float = DEFAULT_THRESHOLD_DEG) -> PairingResult:
    """Minimum squared-error assignment with miss padding.

    Pairs at or beyond ``threshold_deg`` are not allowed, so such paths count
    as misses.  Unassigned estimates are ignored.
    """
    if not threshold_deg > 0:
        raise EvaluationError("threshold must be positive")
    est = np.asarray(estimates, dtype=float).reshape(-1)
    tru = np.asarray(truth, dtype=float).reshape(-1)
    n_t, n_e = tru.size, est.size
    if n_t == 0:
        return PairingResult(np.zeros(0, dtype=int), np.zeros(0), 0, 0.0, float(threshold_deg))
    cost, err = _pair_cost(est, tru, float(threshold_deg))
    rows, cols = linear_sum_assignment(cost)
    assignment = np.full(n_t, -1, dtype=int)
    errors = np.full(n_t, np.nan)
    for r, c in zip(rows, cols):
        if c < n_e and err[r, c] < threshold_deg:
            assignment[r] = c
            errors[r] = err[r, c]
    failures = int(np.sum(assignment < 0))
    return PairingResult(assignment, errors, failures, float(cost[rows, cols].sum()), float(threshold_deg))


@dataclass(frozen=True, eq=False)
class TrialReport:
    trial: int
    snr_db: float
    estimator: str
    truth: np.ndarray
    estimates: np.ndarray
    pairing: PairingResult
    d_hat: int = -1
    iterations: int = -1
    converged: bool = True
    error: str = ""
    timings: dict = field(default_factory=dict)

    @property
    def n_paths(self) -> int:
        return int(self.truth.size)


@dataclass(frozen=True)
class AggregateReport:
    estimator: str
    snr_db: float
    n_trials: int
    n_paths: int
    n_paired: int
    p_d: float
    rmse: float | None
    trimmed_rmse: float | None
    trim_fraction: float | None
    runtime_failures: int = 0
    median_iterations: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def _rms(x) -> float | None:
    x = np.asarray(x, dtype=float)
    return float(np.sqrt(np.mean(x ** 2))) if x.size else None


def compute_metrics(reports, trim_fraction: float | None = None) -> AggregateReport:
    """P_d, conditional RMSE and trimmed RMSE for one (estimator, SNR) cell.

    The trimmed RMSE keeps the ``round(trim_fraction * n_paths)`` smallest
    paired errors, ``n_paths`` being the total path count over all trials.
    """
    reports = list(reports)
    if not reports:
        raise EvaluationError("no trials to aggregate")
    n_paths = sum(r.n_paths for r in reports)
    errs = np.concatenate([r.pairing.paired_errors for r in reports]) if reports else np.zeros(0)
    n_paired = int(errs.size)
    p_d = n_paired / n_paths if n_paths else 0.0
    trimmed = None
    if trim_fraction is not None:
        if not 0 < trim_fraction <= 1:
            raise EvaluationError("trim fraction must lie in (0, 1]")
        keep = min(int(round(trim_fraction * n_paths)), n_paired)
        trimmed = _rms(np.sort(errs)[:keep]) if keep > 0 else None
    its = [r.iterations for r in reports if r.iterations >= 0]
    return AggregateReport(
        reports[0].estimator, float(reports[0].snr_db), len(reports), int(n_paths), n_paired, float(p_d),
        _rms(errs), trimmed, trim_fraction, sum(1 for r in reports if r.error),
        float(np.median(its)) if its else None,
    )


# ---------------------------------------------------------------------------
# Experiment configuration


def parse_chains(spec) -> list[list[str]]:
    """``"pboost,sbs-map,aic;omp-wsf"`` -> ``[["pboost", "sbs-map", "aic"], ["omp-wsf"]]``.

    A chain starting with a FOCUSS-type stage is initialized by ``l2``.
    """
    if isinstance(spec, str):
        chains = [[s.strip() for s in c.split(",") if s.strip()] for c in spec.split(";") if c.strip()]
    else:
        chains = [list(c) for c in spec]
    if not chains or any(not c for c in chains):
        raise EvaluationError("estimator chain must be nonempty")
    out = []
    for c in chains:
        bad = [s for s in c if s not in ESTIMATORS]
        if bad:
            raise EvaluationError(f"unknown estimator {bad[0]!r}; valid names: {', '.join(ESTIMATORS)}")
        if c[0] in ("focuss", "sbs-map"):
            c = ["l2"] + c
        if c[0] == "aic":
            raise EvaluationError("aic needs a preceding spectral stage")
        for prev, cur in zip(c, c[1:]):
            if cur in ("focuss", "sbs-map", "aic") and prev not in SPECTRAL:
                raise EvaluationError(f"{cur} cannot follow {prev}")
            if cur in ("pboost", "music", "mvdr", "l2", "omp-wsf"):
                raise EvaluationError(f"{cur} must start a chain")
        out.append(c)
    return out


def chain_labels(chains) -> list[str]:
    """Every prefix of every chain, in first-appearance order."""
    labels = []
    for c in chains:
        for i in range(1, len(c) + 1):
            lab = "+".join(c[:i])
            if lab not in labels:
                labels.append(lab)
    return labels


@dataclass(frozen=True)
class ExperimentConfig:
    family: str = "coherent"
    snr_db: tuple = (10.0,)
    trials: int = 200
    seed: int = 0
    chains: str = "pboost,sbs-map,aic"
    doas: tuple = FIXED_DOAS
    coherent_groups: tuple = ((0, 1), (2, 3))
    phases_deg: tuple | None = None
    n_snapshots: int = 100
    n_sensors: int = 8
    spacing: float = 0.5
    grid_start: float = -89.5
    grid_stop: float = 89.5
    grid_step: float = 1.0
    rank: int | None = None          # None: 4 / 2 for the fixed families, estimated for matern
    rank_criterion: str = "aic"
    threshold_deg: float = DEFAULT_THRESHOLD_DEG
    trim: float | None = None
    workers: int = 1
    sector_deg: float | None = None
    dense_peaks: int = 0
    max_peaks: int | None = None
    focuss_tol: float = 1e-7
    focuss_max_iter: int = 200
    aic_samples: int = 0
    matern: MaternParams = MaternParams()

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise EvaluationError(f"unknown scenario family {self.family!r}; valid: {', '.join(FAMILIES)}")
        if self.trials < 1:
            raise EvaluationError("trials must be at least 1")
        if not self.snr_db:
            raise EvaluationError("SNR list must be nonempty")
        if self.workers < 1:
            raise EvaluationError("workers must be at least 1")
        if not self.threshold_deg > 0:
            raise EvaluationError("threshold must be positive")
        parse_chains(self.chains)

    def to_dict(self, include_workers: bool = False) -> dict:
        d = asdict(self)
        if not include_workers:
            d.pop("workers")   # outputs do not depend on it
        return d

    def config_hash(self) -> str:
        d = self.to_dict()
        text = json.dumps(d, sort_keys=True, default=str)
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def fixed_rank(self) -> int | None:
        if self.rank is not None:
            return self.rank
        if self.family == "uncorrelated":
            return len(self.doas)
        if self.family == "coherent":
            grouped = {i for g in self.coherent_groups for i in g}
            return len(self.coherent_groups) + len(self.doas) - len(grouped)
        return None


def trial_seed(master: int, trial: int, snr_index: int) -> np.random.SeedSequence:
    """Per-trial seed, independent of scheduling."""
    return np.random.SeedSequence(entropy=int(master), spawn_key=(int(snr_index), int(trial)))


def draw_scenario(config: ExperimentConfig, snr_db: float, rng):
    if config.family == "matern":
        return generate_matern_scenario(rng, replace(config.matern, snr_db=snr_db,
                                                     n_snapshots=config.n_snapshots))
    groups = config.coherent_groups if config.family == "coherent" else ()
    phases = None if config.phases_deg is None else np.deg2rad(config.phases_deg)
    return fixed_scenario(config.doas, snr_db, config.n_snapshots, groups, phases, rng)


# ---------------------------------------------------------------------------
# Trial execution


class ExperimentContext:
    """Geometry, codebook and noise shared by every trial of an experiment."""

    def __init__(self, config: ExperimentConfig):
        self.config = config
        self.geometry = ArrayGeometry.ula(config.n_sensors, config.spacing)
        self.noise = NoiseModel.white(config.n_sensors)
        self.codebook = build_codebook(self.geometry, self.noise,
                                       uniform_grid(config.grid_start, config.grid_stop, config.grid_step))
        self.chains = parse_chains(config.chains)
        self.labels = chain_labels(self.chains)


def _dense_refine(peaks, pcov, subspace, codebook, factor):
    """Re-evaluate the booster spectrum on a finer grid around each peak."""
    step = codebook.quantization_step
    out = []
    for theta in codebook.grid[peaks.indices]:
        fine = theta + step * np.linspace(-1.0, 1.0, 2 * factor + 1)
        _, amp, _ = spectrum_at(pcov.r_q, codebook.steer(fine), subspace)
        out.append(fine[int(np.argmax(amp))])
    return np.array(out)


def run_stages(ctx: ExperimentContext, batch, subspace, scenario):
    """Evaluate every chain prefix; returns ``{label: (estimates, info)}``.

    ``info`` carries the stage outputs (``amplitudes``, ``peaks``, ``decision``,
    booster ``rows`` and ``counters``) besides ``d_hat``, ``iterations`` and timing.
    """
    cfg, cb = ctx.config, ctx.codebook
    results: dict = {}
    spectra: dict = {}
    m = cb.n_sensors
    for chain in ctx.chains:
        for i, name in enumerate(chain):
            label = "+".join(chain[:i + 1])
            if label in results:
                continue
            parent = "+".join(chain[:i])
            info = {}
            t0 = time.perf_counter()
            try:
                if subspace is None:
                    raise _NoSignal()
                if name == "pboost":
                    spec, diag = run_pboost(subspace, cb, PBoostConfig(sector_deg=cfg.sector_deg))
                    amp = spec.amplitudes
                    info["pcov"] = diag.pcov
                    info["rows"] = spec.rows
                    info["counters"] = diag.counters
                    info["stage_seconds"] = diag.timings
                elif name == "music":
                    amp = spectral_music(subspace, cb)
                elif name == "mvdr":
                    amp = robust_mv_beamformer(batch, cb).power
                elif name == "l2":
                    amp = min_norm_init(cb, subspace)
                elif name in ("focuss", "sbs-map"):
                    reg = 0.0 if name == "focuss" else None
                    st = focuss_solve(spectra[parent], cb, subspace, cfg.focuss_tol, cfg.focuss_max_iter, reg)
                    amp = st.d_s
                    info["iterations"] = st.iteration
                    info["converged"] = st.converged
                elif name == "omp-wsf":
                    d_known = min(scenario.n_sources, m - 1)
                    idx, _, _ = omp_wsf(subspace, cb, d_known)
                    amp = None
                    est = np.sort(cb.grid[idx])
                elif name == "aic":
                    pk = find_peaks(spectra[parent], cb, cfg.max_peaks)
                    dec = aic_validate(pk, subspace, cb, cfg.aic_samples or None,
                                       np.random.default_rng(0) if cfg.aic_samples else None)
                    amp = None
                    est = np.asarray(dec.selected_doas)
                    info["d_hat"] = dec.selected_d
                    info["decision"] = dec
                    info["peaks"] = pk
                if amp is not None:
                    spectra[label] = amp
                    info["amplitudes"] = amp
                    pk = find_peaks(amp, cb, cfg.max_peaks)
                    if name == "pboost" and cfg.dense_peaks > 0 and pk.count:
                        est = _dense_refine(pk, info["pcov"], subspace, cb, cfg.dense_peaks)
                    else:
                        est = pk.refined_doas
                    info["d_hat"] = pk.count
                    info["peaks"] = pk
                info.pop("pcov", None)
                info["error"] = ""
            except _NoSignal:
                est, info = np.zeros(0), {"d_hat": 0, "error": ""}
                spectra[label] = np.zeros(cb.size)
            except Exception as exc:  # a failing estimator is a failed trial, not a crash
                est, info = np.zeros(0), {"error": f"{type(exc).__name__}: {exc}"}
                spectra[label] = np.zeros(cb.size)
            info["seconds"] = time.perf_counter() - t0
            results[label] = (np.asarray(est, dtype=float), info)
    return results


class _NoSignal(Exception):
    pass


def run_trial(ctx: ExperimentContext, snr_index: int, trial: int) -> list[TrialReport]:
    cfg = ctx.config
    snr = float(cfg.snr_db[snr_index])
    rng = np.random.default_rng(trial_seed(cfg.seed, trial, snr_index))
    scenario = draw_scenario(cfg, snr, rng)
    batch = synthesize_snapshots(scenario, ctx.geometry, ctx.noise, rng)
    subspace, _ = subspace_from_snapshots(batch, ctx.noise, cfg.fixed_rank(), cfg.rank_criterion)
    results = run_stages(ctx, batch, subspace, scenario)
    reports = []
    for label in ctx.labels:
        est, info = results[label]
        pairing = pair_doas(est, scenario.true_doas, cfg.threshold_deg)
        reports.append(TrialReport(trial, snr, label, scenario.true_doas, est, pairing,
                                   int(info.get("d_hat", -1)), int(info.get("iterations", -1)),
                                   bool(info.get("converged", True)), info.get("error", ""),
                                   {"seconds": info.get("seconds", 0.0)}))
    return reports


_WORKER_CTX = None


def _init_worker(config):
    global _WORKER_CTX
    _WORKER_CTX = ExperimentContext(config)


def _run_chunk(jobs):
    with threadpool_limits(limits=1):
        return [run_trial(_WORKER_CTX, s, t) for s, t in jobs]


@dataclass
class MonteCarloResult:
    config: ExperimentConfig
    aggregates: list
    trials: list

    def aggregate(self, estimator: str, snr_db: float) -> AggregateReport:
        for a in self.aggregates:
            if a.estimator == estimator and a.snr_db == float(snr_db):
                return a
        raise KeyError((estimator, snr_db))


def run_monte_carlo(config: ExperimentConfig, keep_trials: bool = True) -> MonteCarloResult:
    """Run ``config.trials`` trials per SNR for every chain prefix.

    Trials are seeded from ``(seed, snr index, trial)`` only and reduced in a
    fixed order, so results do not depend on ``config.workers``.
    """
    if config.trials < 1:
        raise EvaluationError("no trials requested")
    jobs = [(s, t) for s in range(len(config.snr_db)) for t in range(config.trials)]
    if config.workers > 1:
        n_chunks = min(len(jobs), 4 * config.workers)
        chunks = [jobs[i::n_chunks] for i in range(n_chunks)]
        with ProcessPoolExecutor(max_workers=config.workers, initializer=_init_worker,
                                 initargs=(config,)) as pool:
            parts = list(pool.map(_run_chunk, chunks))
        flat = {}
        for chunk, part in zip(chunks, parts):
            for job, reps in zip(chunk, part):
                flat[job] = reps
        per_job = [flat[j] for j in jobs]
    else:
        ctx = ExperimentContext(config)
        with threadpool_limits(limits=1):
            per_job = [run_trial(ctx, s, t) for s, t in jobs]

    labels = chain_labels(parse_chains(config.chains))
    aggregates = []
    for lab in labels:
        for s, snr in enumerate(config.snr_db):
            cell = [r for (js, _), reps in zip(jobs, per_job) if js == s for r in reps if r.estimator == lab]
            aggregates.append(compute_metrics(cell, config.trim))
    trials = [r for reps in per_job for r in reps] if keep_trials else []
    return MonteCarloResult(config, aggregates, trials)


REPORT_COLUMNS = ("estimator", "snr_db", "trials", "paths", "paired", "p_d", "rmse_deg",
                  "trimmed_rmse_deg", "trim_fraction", "runtime_failures", "median_iterations")


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.10g}"
    return str(v)


def report_rows(aggregates) -> list[list[str]]:
    """One row per (estimator, SNR) in :data:`REPORT_COLUMNS` order."""
    rows = []
    for a in aggregates:
        rows.append([_fmt(x) for x in (a.estimator, a.snr_db, a.n_trials, a.n_paths, a.n_paired, a.p_d,
                                       a.rmse, a.trimmed_rmse, a.trim_fraction, a.runtime_failures,
                                       a.median_iterations)])
    return rows
