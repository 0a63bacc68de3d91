"""Command-line front end.

Subcommands::

    pboost spectrum    one realization, one spectrum file per chain stage
    pboost montecarlo  P_d / RMSE report over seeded trials
    pboost peaks       refined peaks of a spectrum CSV
    pboost validate    AIC source validation of one realization

Exit codes: 0 success, 2 configuration error, 3 estimator/runtime error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import re
import sys
from pathlib import Path

import numpy as np

from .array_model import SnapshotBatch, SteeringCodebook, synthesize_snapshots
from .config import ConfigError, build_config, load_config
from .detection import find_peaks
from .evaluation import (ESTIMATORS, REPORT_COLUMNS, EvaluationError, ExperimentConfig, ExperimentContext,
                         draw_scenario, run_monte_carlo, run_stages, report_rows, trial_seed)
from .subspace import SubspaceError, subspace_from_snapshots

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


class RuntimeFailure(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# argument handling


def _floats(text):
    return tuple(float(t) for t in text.replace(",", " ").split())


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--scenario", help="key = value scenario file; flags override its entries")
    p.add_argument("--family", choices=("uncorrelated", "coherent", "matern"))
    p.add_argument("--chain", help=f"';'-separated chains of ','-separated stages from {{{', '.join(ESTIMATORS)}}}")
    p.add_argument("--snr", type=_floats, help="SNR list in dB, e.g. '-5,0,5'")
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--workers", type=int)
    p.add_argument("--rank", type=int, help="signal subspace rank override")
    p.add_argument("--threshold-deg", type=float, dest="threshold_deg")
    p.add_argument("--trim", type=float, help="trimmed-RMSE fraction")
    p.add_argument("--sector-deg", type=float, dest="sector_deg", help="limit the booster's OMP search")
    p.add_argument("--dense-peaks", type=int, dest="dense_peaks",
                   help="re-evaluate booster peaks on a grid refined by this factor")
    p.add_argument("--out", default="out", help="output directory")
    p.add_argument("--timings", action="store_true", help="also write wall-clock timings (not reproducible)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pboost", description="Parallel DOA booster simulator.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("spectrum", help="write per-stage spectra for one realization")
    _add_common(p)
    p.add_argument("--snapshots", help="CSV of snapshots (rows = sensors, interleaved re/im)")

    p = sub.add_parser("montecarlo", help="Monte-Carlo P_d and RMSE report")
    _add_common(p)
    p.add_argument("--trials", type=int)
    p.add_argument("--trial-log", action="store_true", dest="trial_log", help="also write per-trial rows")

    p = sub.add_parser("peaks", help="refined peaks of a spectrum CSV")
    p.add_argument("spectrum_csv")
    p.add_argument("--sensors", type=int, default=8, help="array size M (at most M-1 peaks)")
    p.add_argument("--max-peaks", type=int, dest="max_peaks")
    p.add_argument("--out", help="write CSV here instead of stdout")

    p = sub.add_parser("validate", help="AIC validation of one realization")
    _add_common(p)
    p.add_argument("--snapshots", help="CSV of snapshots (rows = sensors, interleaved re/im)")
    return parser


_FLAG_KEYS = {"family": "family", "chain": "chain", "snr": "snr", "seed": "seed", "workers": "workers",
              "rank": "rank", "threshold_deg": "threshold_deg", "trim": "trim", "sector_deg": "sector_deg",
              "dense_peaks": "dense_peaks", "trials": "trials"}


def config_from_args(args) -> ExperimentConfig:
    entries, source = {}, "<flags>"
    if args.scenario:
        entries = load_config(args.scenario)
        source = args.scenario
    overrides = {key: getattr(args, attr) for attr, key in _FLAG_KEYS.items() if hasattr(args, attr)}
    return build_config(entries, overrides, source)


# ---------------------------------------------------------------------------
# output helpers


def _header(command: str, cfg: ExperimentConfig) -> str:
    return f"# pboost {command} config_hash={cfg.config_hash()} seed={cfg.seed}\n"


def _write_csv(path: Path, header: str, columns, rows):
    buf = io.StringIO()
    buf.write(header)
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    w.writerows(rows)
    path.write_text(buf.getvalue())


def _write_json(path: Path, header_cfg: ExperimentConfig, command: str, payload: dict):
    doc = {"command": command, "config_hash": header_cfg.config_hash(), "seed": header_cfg.seed}
    doc.update(payload)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    return str(o)


def _g(x) -> str:
    return f"{float(x):.10g}"


def _safe(label: str) -> str:
    return label.replace("+", "_")


def _realization(cfg: ExperimentConfig, ctx: ExperimentContext, snr_index: int, snapshots_path=None):
    rng = np.random.default_rng(trial_seed(cfg.seed, 0, snr_index))
    scenario = draw_scenario(cfg, float(cfg.snr_db[snr_index]), rng)
    if snapshots_path:
        try:
            batch = SnapshotBatch.from_csv(snapshots_path)
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot read snapshots {snapshots_path}: {exc}") from exc
        if batch.n_sensors != cfg.n_sensors:
            raise ConfigError(f"snapshot file has {batch.n_sensors} sensors, config expects {cfg.n_sensors}")
    else:
        batch = synthesize_snapshots(scenario, ctx.geometry, ctx.noise, rng)
    rank = cfg.fixed_rank()
    subspace, _ = subspace_from_snapshots(batch, ctx.noise, rank, cfg.rank_criterion)
    return scenario, batch, subspace


# ---------------------------------------------------------------------------
# commands


def cmd_spectrum(args) -> int:
    cfg = config_from_args(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ctx = ExperimentContext(cfg)
    header = _header("spectrum", cfg)
    theta = ctx.codebook.grid
    long_rows, diagnostics = [], {}
    for s, snr in enumerate(cfg.snr_db):
        scenario, batch, subspace = _realization(cfg, ctx, s, getattr(args, "snapshots", None))
        results = run_stages(ctx, batch, subspace, scenario)
        errors = {lab: info["error"] for lab, (_, info) in results.items() if info.get("error")}
        if errors:
            raise RuntimeFailure("; ".join(f"{k}: {v}" for k, v in errors.items()))
        tag = f"snr{_g(snr)}"
        diag = {"true_doas": scenario.true_doas, "rank": None if subspace is None else subspace.rank,
                "stages": {}}
        for label in ctx.labels:
            est, info = results[label]
            entry = {"estimates_deg": est, "d_hat": info.get("d_hat")}
            if "iterations" in info:
                entry["iterations"] = info["iterations"]
                entry["converged"] = info["converged"]
            if "counters" in info:
                entry["counters"] = {k: v for k, v in info["counters"].items()}
            if args.timings:
                entry["seconds"] = info["seconds"]
                if "stage_seconds" in info:
                    entry["stage_seconds"] = info["stage_seconds"]
            if "decision" in info:
                dec = info["decision"]
                pk = info["peaks"]
                amps = {int(i): a for i, a in zip(pk.snapped_indices, pk.amplitudes)}
                rows = [[_g(ctx.codebook.grid[i]), _g(amps[int(i)])] for i in dec.selected_indices]
                _write_csv(out / f"peaks_{_safe(label)}_{tag}.csv", header, ["theta_deg", "amplitude"], rows)
                entry["aic"] = json.loads(dec.to_json())
                long_rows += [[label, _g(snr), r[0], r[1]] for r in rows]
            elif "amplitudes" in info:
                amp = info["amplitudes"]
                cols = ["theta_deg", "amplitude"]
                data = [[_g(t), _g(a)] for t, a in zip(theta, amp)]
                if "rows" in info:
                    rws = info["rows"]
                    for k in range(rws.shape[1]):
                        cols += [f"re_{k + 1}", f"im_{k + 1}"]
                    data = [d + [v for z in rws[q] for v in (_g(z.real), _g(z.imag))] for q, d in enumerate(data)]
                _write_csv(out / f"spectrum_{_safe(label)}_{tag}.csv", header, cols, data)
                long_rows += [[label, _g(snr), _g(t), _g(a)] for t, a in zip(theta, amp)]
            else:
                rows = [[_g(t), ""] for t in est]
                _write_csv(out / f"peaks_{_safe(label)}_{tag}.csv", header, ["theta_deg", "amplitude"], rows)
                long_rows += [[label, _g(snr), r[0], ""] for r in rows]
            diag["stages"][label] = entry
        diagnostics[tag] = diag
    _write_csv(out / "spectra_long.csv", header, ["estimator", "snr_db", "theta_deg", "value"], long_rows)
    _write_json(out / "diagnostics.json", cfg, "spectrum", {"config": cfg.to_dict(), "realizations": diagnostics})
    return EXIT_OK


def cmd_montecarlo(args) -> int:
    cfg = config_from_args(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = run_monte_carlo(cfg, keep_trials=True)
    header = _header("montecarlo", cfg)
    _write_csv(out / "report.csv", header, REPORT_COLUMNS, report_rows(result.aggregates))
    long_rows = []
    for a in result.aggregates:
        for metric in ("p_d", "rmse", "trimmed_rmse"):
            v = getattr(a, metric)
            long_rows.append([a.estimator, _g(a.snr_db), metric, "" if v is None else _g(v)])
    _write_csv(out / "report_long.csv", header, ["estimator", "snr_db", "metric", "value"], long_rows)
    payload = {
        "config": cfg.to_dict(),
        "seed_scheme": "SeedSequence(entropy=seed, spawn_key=(snr_index, trial))",
        "aggregates": [a.to_dict() for a in result.aggregates],
    }
    if args.timings:
        payload["mean_seconds"] = {
            lab: float(np.mean([t.timings["seconds"] for t in result.trials if t.estimator == lab]))
            for lab in dict.fromkeys(t.estimator for t in result.trials)
        }
    _write_json(out / "report.json", cfg, "montecarlo", payload)
    if args.trial_log:
        rows = []
        for t in result.trials:
            rows.append([t.estimator, _g(t.snr_db), t.trial, t.n_paths, t.pairing.successes, t.d_hat,
                         t.iterations, " ".join(_g(e) for e in t.estimates),
                         " ".join(_g(e) for e in t.truth), t.error])
        _write_csv(out / "trials.csv", header, ["estimator", "snr_db", "trial", "paths", "paired", "d_hat",
                                                "iterations", "estimates_deg", "truth_deg", "error"], rows)
    return EXIT_OK


def _peaks_header(text: str) -> str:
    # keep the provenance of spectra we wrote; hash foreign inputs by content
    m = re.search(r"^# pboost \S+ config_hash=(\S+) seed=(\S+)", text, flags=re.M)
    if m:
        return f"# pboost peaks config_hash={m.group(1)} seed={m.group(2)}\n"
    digest = hashlib.sha256(text.encode()).hexdigest()[:16]
    return f"# pboost peaks config_hash={digest} seed=none\n"


def cmd_peaks(args) -> int:
    path = Path(args.spectrum_csv)
    if not path.is_file():
        raise ConfigError(f"spectrum file not found: {path}")
    try:
        text = path.read_text()
        lines = [ln for ln in text.splitlines(keepends=True) if not ln.startswith("#")]
        reader = csv.DictReader(lines)
        rows = [(float(r["theta_deg"]), float(r["amplitude"])) for r in reader]
    except (KeyError, ValueError, TypeError) as exc:
        raise ConfigError(f"{path}: expected theta_deg and amplitude columns ({exc})") from exc
    if len(rows) < 3:
        raise ConfigError(f"{path}: need at least three spectrum samples")
    theta = np.array([r[0] for r in rows])
    amp = np.array([r[1] for r in rows])
    if np.any(np.diff(theta) <= 0):
        raise ConfigError(f"{path}: theta_deg must be strictly increasing")
    grid_only = SteeringCodebook(theta, np.zeros((args.sensors, theta.size)), np.zeros((args.sensors, theta.size)),
                                 float(np.median(np.diff(theta))), None, None)
    try:
        pk = find_peaks(amp, grid_only, args.max_peaks)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    body = io.StringIO()
    body.write(_peaks_header(text))
    w = csv.writer(body, lineterminator="\n")
    w.writerow(["theta_deg", "interpolated_deg", "amplitude"])
    for t, ti, a in zip(pk.refined_doas, pk.interpolated_doas, pk.amplitudes):
        w.writerow([_g(t), _g(ti), _g(a)])
    if args.out:
        Path(args.out).write_text(body.getvalue())
    else:
        sys.stdout.write(body.getvalue())
    return EXIT_OK


def cmd_validate(args) -> int:
    cfg = config_from_args(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ctx = ExperimentContext(cfg)
    aic_labels = [lab for lab in ctx.labels if lab.endswith("aic")]
    if not aic_labels:
        raise ConfigError("validate needs a chain ending in 'aic'")
    decisions = {}
    for s, snr in enumerate(cfg.snr_db):
        scenario, batch, subspace = _realization(cfg, ctx, s, getattr(args, "snapshots", None))
        results = run_stages(ctx, batch, subspace, scenario)
        for lab in aic_labels:
            _, info = results[lab]
            if info.get("error"):
                raise RuntimeFailure(f"{lab}: {info['error']}")
            dec = info.get("decision")
            doc = json.loads(dec.to_json()) if dec is not None else {"selected_d": 0, "selected_doas": []}
            doc["true_doas"] = scenario.true_doas.tolist()
            decisions.setdefault(f"snr{_g(snr)}", {})[lab] = doc
    _write_json(out / "aic.json", cfg, "validate", {"decisions": decisions})
    for tag, by_label in decisions.items():
        for lab, doc in by_label.items():
            print(f"{tag} {lab}: D={doc['selected_d']} doas={[round(x, 2) for x in doc['selected_doas']]}")
    return EXIT_OK


COMMANDS = {"spectrum": cmd_spectrum, "montecarlo": cmd_montecarlo, "peaks": cmd_peaks, "validate": cmd_validate}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on bad usage already
        return int(exc.code or 0)
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, EvaluationError) as exc:
        print(f"pboost: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except RuntimeFailure as exc:
        print(f"pboost: runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (ArithmeticError, np.linalg.LinAlgError, RuntimeError, SubspaceError) as exc:
        print(f"pboost: runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
