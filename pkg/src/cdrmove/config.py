"""Structured run configuration: defaults, JSON loading, strict validation."""

from __future__ import annotations

import copy
import json
from pathlib import Path
from typing import Any, Mapping

from .features import DEFAULT_FEATURES
from .records import CDR_FIELDS


class ConfigError(ValueError):
    """Raised for unknown keys, bad types, or unusable parameter values."""


DEFAULT_CONFIG: dict[str, Any] = {
    "window_start": "2008-01",
    "months": 24,
    "seed": 0,
    "output_dir": "out",
    "inputs": {
        "cdr": ["cdr.csv"],
        "demographics": "demographics.csv",
        "towers": "towers.csv",
    },
    "ingest": {
        "delimiter": ";",
        "columns": {name: name for name in CDR_FIELDS},
        "dedup": True,
        "dedup_tolerance_s": 1.0,
    },
    "homes": {
        "weekdays": [0, 1, 2, 3, 4],
        "night_only": None,  # e.g. [22, 7] to restrict to night hours
    },
    "ties": {
        "top_k": 5,
        "persistence_months": 3,
        "window_pre": 4,
        "window_post": 4,
        "min_stay": 4,
        "ranking": "competition",
        "activity": "per_month",
        "train_fraction": 0.8,
    },
    "series": {
        "include_t0": "neither",
    },
    "cluster": {
        "k_range": [2, 8],
        "restarts": 10,
        "max_iter": 300,
        "tol": 1e-6,
        "bootstrap": 100,
        "truncation_windows": [[-4, 4], [-2, 4], [-4, 2]],
        "ward_check": False,
    },
    "control": {
        "size": None,  # None = same size as the mover pair set
    },
    "features": {
        "transforms": {
            "count_pre": "log",
            "distance_move": "log",
            "distance_ea_pre": "log",
        },
        "zero_count_km": 0.1,
        "zero_fraction": 0.001,
    },
    "models": {
        "cv_folds": 5,
        "n_perm": 5,
        "regression_kinds": [
            "OLS",
            "Ridge",
            "ElasticNet",
            "KNN",
            "SVR_lin",
            "SVR_poly",
            "SVR_rbf",
        ],
        "classification_kinds": ["LogRegL2", "SVM_lin", "SVM_poly", "SVM_rbf"],
        "grids": {},  # per-kind overrides of the built-in search grids
        "count_target_transform": "log",
        "fraction_target_transform": "logit",
        "feature_sets": {"all": list(DEFAULT_FEATURES)},
    },
    "synth": {
        "n_users": 400,
        "mover_fraction": 0.05,
        "n_provinces": 6,
        "cities_per_province": 2,
        "towers_per_city": 2,
        "age_range": [18, 80],
        "unknown_demographics_fraction": 0.0,
        "bg_call_rate": 3.0,
        "bg_sms_rate": 1.0,
        "planted_ties_per_mover": 1,
        "control_ties": 40,
        "pair_rate_median": 12.0,
        "pair_rate_sigma": 0.35,
        "regime_delta": 0.5,
        "rise_prob": 0.5,
        "rate_drift_phi": 0.9,
        "rate_drift_sigma": 0.2,
        "direction_split_range": [0.35, 0.65],
        "silent_month_prob": 0.0,
        "travel_noise_prob": 0.0,
        "mirror_legs": True,
        "move_month_range": [5, 20],
    },
}

# Keys whose sub-dictionaries hold free-form user values, not a fixed schema.
_OPEN_DICTS = {
    ("ingest", "columns"),
    ("features", "transforms"),
    ("models", "grids"),
    ("models", "feature_sets"),
}


def _check_keys(given: Mapping, defaults: Mapping, path: tuple[str, ...]) -> None:
    for key, value in given.items():
        if key not in defaults:
            where = ".".join(path) or "<root>"
            raise ConfigError(f"unknown config key {key!r} under {where}")
        default_value = defaults[key]
        if (
            isinstance(value, Mapping)
            and isinstance(default_value, Mapping)
            and path + (key,) not in _OPEN_DICTS
        ):
            _check_keys(value, default_value, path + (key,))


def _deep_merge(base: dict, override: Mapping) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if (
            isinstance(value, Mapping)
            and key in out
            and isinstance(out[key], Mapping)
        ):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def parse_window_start(text: str) -> tuple[int, int]:
    try:
        year_s, month_s = text.split("-")
        year, month = int(year_s), int(month_s)
    except ValueError as exc:
        raise ConfigError(f"window_start must look like '2008-01', got {text!r}") from exc
    if not 1 <= month <= 12:
        raise ConfigError(f"window_start month out of range: {text!r}")
    return year, month


def validate(config: Mapping) -> dict:
    """Merge a partial config over the defaults, rejecting unknown keys."""
    _check_keys(config, DEFAULT_CONFIG, ())
    merged = _deep_merge(DEFAULT_CONFIG, config)
    parse_window_start(merged["window_start"])
    if merged["months"] < 1:
        raise ConfigError("months must be positive")
    ties = merged["ties"]
    for key in ("top_k", "persistence_months", "window_pre", "window_post", "min_stay"):
        if int(ties[key]) < 1:
            raise ConfigError(f"ties.{key} must be a positive integer")
    if ties["ranking"] not in ("competition", "dense"):
        raise ConfigError("ties.ranking must be 'competition' or 'dense'")
    if ties["activity"] not in ("per_month", "window"):
        raise ConfigError("ties.activity must be 'per_month' or 'window'")
    if merged["series"]["include_t0"] not in ("neither", "pre", "post"):
        raise ConfigError("series.include_t0 must be neither|pre|post")
    lo, hi = merged["cluster"]["k_range"]
    if not 1 <= lo <= hi:
        raise ConfigError("cluster.k_range must be [lo, hi] with 1 <= lo <= hi")
    return merged


def load_config(path: str | Path | None, overrides: Mapping | None = None) -> dict:
    """Load a JSON config file (optional) and apply CLI overrides."""
    data: dict = {}
    if path is not None:
        with open(path, "r", encoding="utf-8") as handle:
            try:
                data = json.load(handle)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be a JSON object")
    if overrides:
        data = _deep_merge(data, overrides) if data else dict(overrides)
    return validate(data)


def default_config_json() -> str:
    return json.dumps(DEFAULT_CONFIG, indent=2, sort_keys=True)
