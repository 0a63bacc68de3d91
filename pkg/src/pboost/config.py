"""Plain ``key = value`` scenario files mirroring the command-line flags."""

from __future__ import annotations

from dataclasses import fields, replace
from pathlib import Path

from .array_model import MaternParams
from .evaluation import EvaluationError, ExperimentConfig

__all__ = ["ConfigError", "parse_config_text", "load_config", "build_config", "KEYS"]


class ConfigError(ValueError):
    def __init__(self, message: str, source: str | None = None, line: int | None = None):
        where = ""
        if source is not None:
            where = f"{source}:{line}: " if line is not None else f"{source}: "
        super().__init__(where + message)
        self.source = source
        self.line = line


def _floats(text):
    return tuple(float(t) for t in text.replace(",", " ").split())


def _ints(text):
    return tuple(int(t) for t in text.replace(",", " ").split())


def _opt(conv):
    def f(text):
        return None if text.strip().lower() in ("", "none", "auto") else conv(text)
    return f


def _groups(text):
    # "0-1, 2-3" -> ((0, 1), (2, 3))
    out = []
    for part in text.replace(";", ",").split(","):
        part = part.strip()
        if part:
            out.append(tuple(int(i) for i in part.split("-")))
    return tuple(out)


def _grid(text):
    parts = [float(t) for t in text.replace(",", ":").split(":")]
    if len(parts) != 3:
        raise ValueError("grid must be start:stop:step")
    return tuple(parts)


# key -> (ExperimentConfig field or special target, converter)
KEYS = {
    "family": ("family", str),
    "snr": ("snr_db", _floats),
    "trials": ("trials", int),
    "seed": ("seed", int),
    "chain": ("chains", str),
    "doas": ("doas", _floats),
    "groups": ("coherent_groups", _groups),
    "phases_deg": ("phases_deg", _opt(_floats)),
    "snapshots": ("n_snapshots", int),
    "sensors": ("n_sensors", int),
    "spacing": ("spacing", float),
    "grid": ("grid", _grid),
    "rank": ("rank", _opt(int)),
    "rank_criterion": ("rank_criterion", str),
    "threshold_deg": ("threshold_deg", float),
    "trim": ("trim", _opt(float)),
    "workers": ("workers", int),
    "sector_deg": ("sector_deg", _opt(float)),
    "dense_peaks": ("dense_peaks", int),
    "max_peaks": ("max_peaks", _opt(int)),
    "focuss_tol": ("focuss_tol", float),
    "focuss_max_iter": ("focuss_max_iter", int),
    "aic_samples": ("aic_samples", int),
    "matern_cluster_intensity": ("matern.cluster_intensity", float),
    "matern_center_bound_deg": ("matern.center_bound_deg", float),
    "matern_sector_width_deg": ("matern.sector_width_deg", float),
    "matern_source_intensity": ("matern.source_intensity", float),
    "matern_correlation_radius_factor": ("matern.correlation_radius_factor", float),
}


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """Return ``{key: (converted value, line number)}``.

    Blank lines and ``#`` comments are ignored; keys may use ``-`` or ``_``.
    """
    out = {}
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError("expected 'key = value'", source, n)
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_").lower()
        if key not in KEYS:
            raise ConfigError(f"unknown key {key!r}", source, n)
        try:
            out[key] = (KEYS[key][1](value), n)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {exc}", source, n) from exc
    return out


def load_config(path) -> dict:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"scenario file not found: {p}")
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read scenario file {p}: {exc}") from exc
    return parse_config_text(text, str(p))


def build_config(entries: dict, overrides: dict | None = None, source: str = "<config>") -> ExperimentConfig:
    """Merge file entries with (already converted) flag overrides."""
    values = {k: v for k, (v, _) in entries.items()}
    lines = {k: n for k, (_, n) in entries.items()}
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    kwargs, matern = {}, {}
    for key, val in values.items():
        target = KEYS[key][0]
        if target == "grid":
            kwargs["grid_start"], kwargs["grid_stop"], kwargs["grid_step"] = val
        elif target.startswith("matern."):
            matern[target.split(".", 1)[1]] = val
        else:
            kwargs[target] = val
    valid = {f.name for f in fields(ExperimentConfig)}
    assert set(kwargs) <= valid
    try:
        cfg = ExperimentConfig(**kwargs)
        if matern:
            cfg = replace(cfg, matern=replace(MaternParams(), **matern))
    except (EvaluationError, TypeError, ValueError) as exc:
        key = _blame(str(exc), lines)
        raise ConfigError(str(exc), source if key else None, lines.get(key)) from exc
    return cfg


def _blame(message: str, lines: dict):
    # best-effort line attribution for validation errors
    hints = {"family": "family", "trial": "trials", "SNR": "snr", "worker": "workers",
             "threshold": "threshold_deg", "estimator": "chain", "chain": "chain", "aic": "chain"}
    for word, key in hints.items():
        if word in message and key in lines:
            return key
    return None
