import json
import re
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from pboost.cli import main
from pboost.config import ConfigError, build_config, parse_config_text

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
HEADER = re.compile(r"^# pboost \w+ config_hash=([0-9a-f]{16}) seed=(\d+)$")


def _tree(path: Path) -> dict:
    return {p.name: p.read_bytes() for p in sorted(path.iterdir())}


def _check_headers(path: Path, seed: int):
    for p in path.iterdir():
        if p.suffix == ".csv":
            m = HEADER.match(p.read_text().splitlines()[0])
            assert m and int(m.group(2)) == seed, p.name
        else:
            doc = json.loads(p.read_text())
            assert re.fullmatch(r"[0-9a-f]{16}", doc["config_hash"]) and doc["seed"] == seed


def test_config_text_parsing():
    entries = parse_config_text("# c\nfamily = matern\nsnr = -5, 0 ,5\n\ntrim = 0.2  # note\n")
    assert entries["snr"] == ((-5.0, 0.0, 5.0), 3) and entries["trim"] == (0.2, 5)
    cfg = build_config(entries, {"seed": 4, "trials": None})
    assert cfg.family == "matern" and cfg.seed == 4 and cfg.trials == 200


def test_config_error_line():
    with pytest.raises(ConfigError) as exc:
        parse_config_text("family = coherent\n\nbogus = 1\n", "x.cfg")
    assert exc.value.line == 3 and "x.cfg:3" in str(exc.value)
    with pytest.raises(ConfigError) as exc:
        build_config(parse_config_text("snr = 10\ntrials = 0\n", "y.cfg"), source="y.cfg")
    assert exc.value.line == 2


def test_missing_scenario_exit_2(tmp_path, capsys):
    missing = tmp_path / "nope.cfg"
    assert main(["spectrum", "--scenario", str(missing), "--out", str(tmp_path)]) == 2
    assert str(missing) in capsys.readouterr().err


def test_unknown_estimator_exit_2(tmp_path, capsys):
    assert main(["montecarlo", "--chain", "pboost,beamformer", "--trials", "1", "--out", str(tmp_path)]) == 2
    err = capsys.readouterr().err
    assert "beamformer" in err and "omp-wsf" in err and "sbs-map" in err


def test_zero_trials_exit_2(tmp_path):
    assert main(["montecarlo", "--trials", "0", "--out", str(tmp_path)]) == 2


def test_bad_flag_exit_2(tmp_path):
    assert main(["montecarlo", "--snr", "abc", "--out", str(tmp_path)]) == 2


def test_coherent_spectra_files(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert main(["spectrum", "--scenario", str(CONFIGS / "coherent_spectra.cfg"), "--out", str(out)]) == 0
    assert _tree(a) == _tree(b)
    per_stage = sorted(p.name for p in a.iterdir() if p.name.startswith(("spectrum_", "peaks_")))
    assert per_stage == ["peaks_pboost_focuss_aic_snr10.csv", "spectrum_mvdr_snr10.csv",
                         "spectrum_pboost_focuss_snr10.csv", "spectrum_pboost_snr10.csv"]
    _check_headers(a, 3)
    diag = json.loads((a / "diagnostics.json").read_text())
    stages = diag["realizations"]["snr10"]["stages"]
    assert set(stages) == {"mvdr", "pboost", "pboost+focuss", "pboost+focuss+aic"}
    rows = np.loadtxt(a / "spectrum_pboost_snr10.csv", delimiter=",", skiprows=2, usecols=(0, 1))
    assert rows.shape == (180, 2) and np.all(rows[:, 1] >= 0)


def test_montecarlo_outputs_and_workers(tmp_path):
    base = ["montecarlo", "--family", "coherent", "--snr", "0,10", "--trials", "5", "--seed", "9",
            "--chain", "pboost,focuss,aic;omp-wsf", "--trial-log"]
    outs = []
    for w in (1, 3):
        out = tmp_path / f"w{w}"
        assert main(base + ["--workers", str(w), "--out", str(out)]) == 0
        outs.append(_tree(out))
    assert outs[0] == outs[1]
    assert set(outs[0]) == {"report.csv", "report_long.csv", "report.json", "trials.csv"}
    _check_headers(tmp_path / "w1", 9)
    lines = (tmp_path / "w1" / "report.csv").read_text().splitlines()
    assert lines[1].startswith("estimator,snr_db,trials,paths,paired,p_d,rmse_deg")
    assert len(lines) == 2 + 4 * 2


def test_peaks_command(tmp_path, capsys):
    out = tmp_path / "s"
    assert main(["spectrum", "--scenario", str(CONFIGS / "coherent_spectra.cfg"), "--out", str(out)]) == 0
    capsys.readouterr()
    spec = out / "spectrum_pboost_snr10.csv"
    assert main(["peaks", str(spec), "--max-peaks", "4"]) == 0
    text = capsys.readouterr().out.splitlines()
    src_hash = HEADER.match(spec.read_text().splitlines()[0]).group(1)
    assert text[0] == f"# pboost peaks config_hash={src_hash} seed=3"
    assert text[1] == "theta_deg,interpolated_deg,amplitude"
    amps = [float(r.split(",")[2]) for r in text[2:]]
    assert 1 <= len(amps) <= 4 and amps == sorted(amps, reverse=True)
    assert main(["peaks", str(spec), "--max-peaks", "8"]) == 2
    assert main(["peaks", str(tmp_path / "missing.csv")]) == 2


def test_validate_command(tmp_path, capsys):
    out = tmp_path / "v"
    assert main(["validate", "--family", "uncorrelated", "--snr", "30", "--chain", "pboost,aic",
                 "--seed", "1", "--out", str(out)]) == 0
    doc = json.loads((out / "aic.json").read_text())
    dec = doc["decisions"]["snr30"]["pboost+aic"]
    assert dec["selected_d"] == 4
    assert len(dec["aic_curve"]) >= 5
    assert "D=4" in capsys.readouterr().out
    assert main(["validate", "--chain", "pboost", "--out", str(out)]) == 2


def test_runtime_error_exit_3(tmp_path, capsys):
    # identical snapshots: rank one covariance, zero noise eigenvalues
    snaps = tmp_path / "deg.csv"
    np.savetxt(snaps, np.tile([1.0, 0.0], (8, 100)), delimiter=",")
    code = main(["spectrum", "--snapshots", str(snaps), "--rank", "2", "--out", str(tmp_path / "o")])
    assert code == 3
    assert "runtime error" in capsys.readouterr().err


def test_module_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "pboost", "montecarlo", "--trials", "0", "--out", str(tmp_path)],
                       capture_output=True, text=True)
    assert r.returncode == 2 and "trials" in r.stderr
