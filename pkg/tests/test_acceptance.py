"""End-to-end acceptance criteria.

Each test appends one ``criterion N: PASS|FAIL ...`` line that is printed in
the terminal summary, then asserts the criterion at its stated tolerance.
Run alone with ``pytest -m acceptance -v``.
"""

import os
import time

import numpy as np
import pytest
import scipy.linalg as sla

from pboost.array_model import ArrayGeometry, NoiseModel, SteeringCodebook, synthesize_snapshots
from pboost.baselines import focuss_map_step, omp_wsf, robust_mv_beamformer, SparseSolverState
from pboost.cli import main
from pboost.core import PBoostConfig, denoise_rq, gsvd_partition, md_music_csv, run_pboost, spectrum_at
from pboost.evaluation import (ExperimentConfig, ExperimentContext, draw_scenario, pair_doas,
                               run_monte_carlo, trial_seed)
from pboost.subspace import subspace_from_snapshots

from _oracles import (brute_force_pairing_cost, crandn, focuss_min_norm_form, focuss_mmse_form,
                      gradient_fd, md_music_greedy, paige_form_row, random_subspace, ula_codebook,
                      wsf_greedy)
from conftest import VERDICTS

pytestmark = pytest.mark.acceptance

FIXED = np.array([8.0, 13.0, 33.0, 37.0])
CLUSTERS = ((3.0, 18.0), (28.0, 42.0))   # each coherent pair with 5 deg margin
WORKERS = max(1, min(8, os.cpu_count() or 1))


def _verdict(n, ok, detail):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    VERDICTS.append(line)
    print(line)
    return ok


def _maxima(a):
    return np.flatnonzero((a[1:-1] > a[:-2]) & (a[1:-1] > a[2:])) + 1


def _random_codebook(rng, m, q):
    b = crandn(rng, m, q)
    return SteeringCodebook(np.arange(q, dtype=float), b, np.zeros_like(b), 1.0, None, None)


# ---------------------------------------------------------------------------


def test_criterion_1_coherent_resolution():
    cfg = ExperimentConfig(family="coherent", snr_db=(10.0,), trials=200, seed=0, chains="pboost;mvdr")
    ctx = ExperimentContext(cfg)
    cb = ctx.codebook
    t0 = time.perf_counter()
    boost_ok = mv_ok = 0
    for t in range(cfg.trials):
        rng = np.random.default_rng(trial_seed(cfg.seed, t, 0))
        sc = draw_scenario(cfg, 10.0, rng)
        batch = synthesize_snapshots(sc, ctx.geometry, ctx.noise, rng)
        sub, _ = subspace_from_snapshots(batch, ctx.noise, cfg.fixed_rank())
        spec, _ = run_pboost(sub, cb)
        idx = _maxima(spec.amplitudes)
        near = [np.any(np.abs(cb.grid[idx] - d) <= 2.0) for d in FIXED]
        boost_ok += idx.size >= 4 and all(near)
        mv = robust_mv_beamformer(batch, cb).power
        th = cb.grid[_maxima(mv)]
        mv_ok += all(np.sum((th >= lo) & (th <= hi)) <= 2 for lo, hi in CLUSTERS)
    secs = time.perf_counter() - t0
    fb, fm = boost_ok / cfg.trials, mv_ok / cfg.trials
    ok = fb >= 0.70 and fm >= 0.70
    _verdict(1, ok, f"P-BOOST resolves all four in {fb:.1%} (need >=70%); "
                    f"MV <=2 maxima per cluster in {fm:.1%} (need >=70%); {secs:.0f} s")
    assert ok


REFERENCE = {-5.0: (0.32, 2.16), 0.0: (0.51, 2.11), 5.0: (0.60, 2.02)}


def test_criterion_2_random_environment():
    cfg = ExperimentConfig(family="matern", snr_db=tuple(REFERENCE), trials=2000, seed=0, chains="pboost",
                           workers=WORKERS)
    t0 = time.perf_counter()
    res = run_monte_carlo(cfg, keep_trials=False)
    secs = time.perf_counter() - t0
    parts, ok = [], secs < 1800
    for snr, (pd_ref, rmse_ref) in REFERENCE.items():
        a = res.aggregate("pboost", snr)
        good = abs(a.p_d - pd_ref) <= 0.08 and a.rmse is not None and abs(a.rmse - rmse_ref) <= 0.5
        ok &= good
        parts.append(f"{snr:+.0f} dB P_d={a.p_d:.3f} (ref {pd_ref}) RMSE={a.rmse:.2f} (ref {rmse_ref})")
    _verdict(2, ok, "; ".join(parts) + f"; {secs:.0f} s (budget 1800 s)")
    assert ok


def test_criterion_3_focuss_convergence():
    parts, ok = [], True
    for family in ("coherent", "uncorrelated"):
        cfg = ExperimentConfig(family=family, snr_db=(20.0, 40.0), trials=100, seed=0,
                               chains="pboost,focuss;l2,focuss", workers=WORKERS)
        res = run_monte_carlo(cfg, keep_trials=False)
        for snr, floor in ((20.0, 20), (40.0, 40)):
            boost = res.aggregate("pboost+focuss", snr).median_iterations
            minnorm = res.aggregate("l2+focuss", snr).median_iterations
            good = boost <= 15 and minnorm >= floor
            ok &= good
            parts.append(f"{family} {snr:.0f} dB median {boost:g} (<=15) vs {minnorm:g} (>={floor})")
    _verdict(3, ok, "; ".join(parts))
    assert ok


def test_criterion_4_aic_no_overfit():
    cfg = ExperimentConfig(family="uncorrelated", snr_db=(20.0, 30.0, 40.0), trials=500, seed=0,
                           chains="pboost,aic", workers=WORKERS)
    res = run_monte_carlo(cfg)
    parts, ok = [], True
    for snr in cfg.snr_db:
        d = np.array([r.d_hat for r in res.trials if r.estimator == "pboost+aic" and r.snr_db == snr])
        over = float(np.mean(d > 4))
        ok &= over <= 0.02
        parts.append(f"{snr:.0f} dB D>4 in {over:.1%}, D=4 in {np.mean(d == 4):.1%}")
    _verdict(4, ok, "; ".join(parts) + " (need <=2%)")
    assert ok


def test_criterion_5_quantization_floor():
    cfg = ExperimentConfig(family="uncorrelated", snr_db=(40.0,), trials=200, seed=0, chains="pboost",
                           workers=WORKERS)
    a = run_monte_carlo(cfg, keep_trials=False).aggregate("pboost", 40.0)
    ok = a.rmse is not None and 0.25 <= a.rmse <= 0.55
    _verdict(5, ok, f"RMSE={a.rmse:.3f} deg, P_d={a.p_d:.3f}; floors: uniform offset 1/sqrt(12)="
                    f"{1 / np.sqrt(12):.3f}, midway snap 0.500 (need [0.25, 0.55])")
    assert ok


def test_criterion_6_oracle_suites():
    rng = np.random.default_rng(20240601)
    worst = {}

    # closed-form Capon rows against the generalized LS oracle
    err = 0.0
    for _ in range(100):
        m = int(rng.integers(3, 6))
        k = int(rng.integers(1, m))
        cb = _random_codebook(rng, m, 2 * m)
        sub = random_subspace(rng, m, k)
        d = rng.uniform(0.0, 1.0, cb.size)
        r_q = (cb.columns * d ** 2) @ cb.columns.conj().T + sub.e_v @ sub.e_v.conj().T / sub.n_snapshots
        rows, _, _ = spectrum_at(r_q, cb.columns, sub)
        for q in range(cb.size):
            s, t = paige_form_row(r_q, cb.columns[:, q], d[q], sub.weighted_signal)
            err = max(err, np.linalg.norm(rows[q] - s) / np.linalg.norm(s), np.linalg.norm(t) / np.linalg.norm(s))
    worst["capon"] = (err, 1e-9)

    # minimum-norm against MMSE FOCUSS forms, and the library step against both
    err = 0.0
    for _ in range(100):
        m, q = int(rng.integers(3, 9)), int(rng.integers(10, 40))
        cb = _random_codebook(rng, m, q)
        sub = random_subspace(rng, m, int(rng.integers(1, m)))
        d = rng.uniform(0.1, 2.0, q)
        t = sub.weighted_signal
        ref10, _ = focuss_min_norm_form(cb.columns, d, t)
        ref11 = focuss_mmse_form(cb.columns, d, t)
        lib = focuss_map_step(SparseSolverState.from_prior(d), cb, sub, regularizer=0.0).s
        n = np.linalg.norm(ref10)
        err = max(err, np.linalg.norm(ref10 - ref11) / n, np.linalg.norm(lib - ref10) / n)
    worst["focuss"] = (err, 1e-8)

    # joint factorization of PSD pairs, and the cleaned reconstruction against scipy's
    # generalized eigensolver: V^H (A + B) V = I, F = (A + B) V
    err = 0.0
    for _ in range(100):
        m = int(rng.integers(2, 9))
        k = int(rng.integers(1, m))
        xa = crandn(rng, m, int(rng.integers(1, m + 1)))
        a = xa @ xa.conj().T * rng.uniform(0.01, 100.0)
        sub = random_subspace(rng, m, k)
        b = sub.e_v @ sub.e_v.conj().T / sub.n_snapshots
        if m - k + xa.shape[1] < m:
            b = b + 0.1 * np.eye(m)   # keep the pair's sum nonsingular
            sub = None
        f, la, lb, _ = gsvd_partition(a, b)
        scale = np.linalg.norm(a + b)
        lam, v = sla.eigh(a, a + b)
        ref_f = (a + b) @ v
        ref_q = (ref_f * np.maximum(lam, 1 - lam)) @ ref_f.conj().T
        got_q = (f * np.maximum(la, lb)) @ f.conj().T
        err = max(err, np.abs(la + lb - 1).max(),
                  np.linalg.norm((f * la) @ f.conj().T - a) / scale,
                  np.linalg.norm((f * lb) @ f.conj().T - b) / scale,
                  np.linalg.norm(got_q - ref_q) / scale)
        if sub is not None:
            err = max(err, np.linalg.norm(denoise_rq(a, sub).r_q - ref_q) / scale)
    worst["gsvd"] = (err, 1e-8)

    # greedy selections, exact index agreement
    booster_mismatch = wsf_mismatch = 0
    for _ in range(100):
        cb = _random_codebook(rng, 4, 12)
        sub = random_subspace(rng, 4, 1)
        q = int(rng.integers(12))
        booster_mismatch += list(md_music_csv(cb, sub, q).selected_indices) != md_music_greedy(
            cb.columns, sub.e_v, q, 2)
        sub2 = random_subspace(rng, 4, 2)
        idx, _, _ = omp_wsf(sub2, cb, 3)
        wsf_mismatch += list(idx) != wsf_greedy(cb.columns, sub2.weighted_signal, 3)[0]
    worst["omp"] = (booster_mismatch + wsf_mismatch, 0)

    # assignment cost
    bad = 0
    for _ in range(500):
        truth = rng.uniform(-60, 60, int(rng.integers(1, 7)))
        est = rng.uniform(-60, 60, int(rng.integers(0, 7)))
        thr = float(rng.uniform(0.5, 15.0))
        p = pair_doas(est, truth, thr)
        bad += not np.isclose(p.cost, brute_force_pairing_cost(est, truth, thr), rtol=1e-12, atol=1e-12)
    worst["hungarian"] = (bad, 0)

    # codebook gradients
    cb = ula_codebook()
    fd = gradient_fd(ArrayGeometry.ula(8), cb.grid)
    rel = np.linalg.norm(cb.gradients - fd, axis=0) / np.linalg.norm(cb.gradients, axis=0)
    worst["gradient"] = (float(rel.max()), 1e-5)
    assert cb.size == 180

    ok = all((v <= tol) if tol else (v == 0) for v, tol in worst.values())
    _verdict(6, ok, "; ".join(f"{k} {v:.1e} (tol {tol:g})" if tol else f"{k} {v} mismatches"
                              for k, (v, tol) in worst.items()))
    assert ok


def _tree(path):
    return {p.name: p.read_bytes() for p in sorted(path.iterdir())}


def test_criterion_7_determinism(tmp_path):
    commands = {
        "spectrum": ["spectrum", "--family", "coherent", "--snr", "10,20", "--seed", "5",
                     "--chain", "mvdr;pboost,focuss,aic;music;omp-wsf"],
        "validate": ["validate", "--family", "uncorrelated", "--snr", "30", "--seed", "5",
                     "--chain", "pboost,sbs-map,aic"],
        "montecarlo": ["montecarlo", "--family", "matern", "--snr", "0,10", "--trials", "12", "--seed", "5",
                       "--chain", "pboost,sbs-map,aic;omp-wsf;l2,focuss", "--trim", "0.2", "--trial-log"],
    }
    parts, ok = [], True
    for name, argv in commands.items():
        trees = []
        for w in (1, 4, 8):
            out = tmp_path / f"{name}_{w}"
            assert main(argv + ["--workers", str(w), "--out", str(out)]) == 0
            trees.append(_tree(out))
        same = trees[0] == trees[1] == trees[2]
        ok &= same and bool(trees[0])
        parts.append(f"{name} {len(trees[0])} files {'identical' if same else 'DIFFER'}")
    # library level: booster worker count
    ctx = ExperimentContext(ExperimentConfig())
    rng = np.random.default_rng(trial_seed(5, 0, 0))
    sc = draw_scenario(ctx.config, 10.0, rng)
    sub, _ = subspace_from_snapshots(synthesize_snapshots(sc, ctx.geometry, NoiseModel.white(8), rng), ctx.noise, 2)
    specs = [run_pboost(sub, ctx.codebook, PBoostConfig(workers=w))[0].rows for w in (1, 4, 8)]
    lib_same = all(np.array_equal(specs[0], s) for s in specs[1:])
    ok &= lib_same
    parts.append(f"booster rows {'identical' if lib_same else 'DIFFER'}")
    _verdict(7, ok, "; ".join(parts) + " across workers {1, 4, 8}")
    assert ok
