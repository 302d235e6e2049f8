"""JSON experiment configs: defaults per subcommand and strict validation.

A user config is merged over the defaults below. Unknown keys, wrong types
and out-of-range values raise :class:`ConfigError` naming the offending
field.
"""
from __future__ import annotations

import copy
import json
import math
from pathlib import Path

from .sweep import DEFAULT_LRS, DEFAULT_RATIOS, METHODS

TRAIN_DEFAULTS = {
    "optimizer": "adamw",
    "epochs": 5,
    "batch_size": 32,
    "beta1": 0.9,
    "beta2": 0.999,
    "eps": 1e-8,
    "weight_decay": 0.0,
    "constant_schedule": True,
    "divergence_factor": 10.0,
}

DEFAULTS = {
    "theory": {
        "seed": 0,
        "checks": ["closed_form", "dichotomy", "norm_bound"],
        "closed_form": {"instances": 50, "steps": [1, 10, 100], "tolerance": 1e-8},
        "dichotomy": {"instances": 20, "below": 0.99, "above": 1.01, "max_steps": 100_000,
                      "diverge_steps": 1000, "loss_tolerance": 1e-8},
        "norm_bound": {"instances": 10, "trials": 10_000, "sigma": 1.0},
        "trajectory": {"eta_factor": 0.5, "steps": 200},
    },
    "concentration": {
        "seed": 0,
        "n": 4,
        "d": 400,
        "ps": [0.1, 0.3, 0.7],
        "trials": 500,
        "delta": 0.05,
        "trace_trials": 2000,
        "mean_tolerance": 0.05,
        "tail": {"n": 3, "d": 100, "p": 0.5, "trials": 20_000},
    },
    "sweep": {
        "seed": 0,
        "task_seed": 0,
        "method": "random-mask",
        "ratios": list(DEFAULT_RATIOS),
        "learning_rates": list(DEFAULT_LRS),
        "seeds": 3,
        "mask_mode": "exact-count",
        "hessian_iters": 0,
        "lora_rank": 4,
        "lora_alpha": 8.0,
        "record_timing": False,
        "train": TRAIN_DEFAULTS,
    },
    "probe": {
        "seed": 0,
        "task_seed": 0,
        "ratios": [1.0, 0.1, 0.01],
        "learning_rates": [1e-3, 1e-2, 1e-1, 1.0],
        "seeds": 5,
        "epochs": 5,
        "batch_size": 32,
        "hessian_iters": 100,
        "distance_lr": 1e-2,
        "distance_epochs": 200,
        "target_loss_fraction": 0.7,
        "epoch_grid": [1, 2, 4, 8, 16],
        "small_lr_factor": 0.1,
        "compare_ratio": 0.1,
        "accuracy_gap": 0.02,
        "noise_allowance": 0.01,
        "quadratic_head": True,
    },
}


class ConfigError(ValueError):
    pass


def _merge(default, given, path):
    if isinstance(default, dict):
        if not isinstance(given, dict):
            raise ConfigError(f"{path or 'config'}: expected an object")
        unknown = sorted(set(given) - set(default))
        if unknown:
            raise ConfigError(f"{path + '.' if path else ''}{unknown[0]}: unknown key")
        return {k: _merge(v, given[k], f"{path}.{k}" if path else k) if k in given else copy.deepcopy(v)
                for k, v in default.items()}
    if isinstance(default, bool):
        if not isinstance(given, bool):
            raise ConfigError(f"{path}: expected true/false")
        return given
    if isinstance(default, (int, float)):
        if isinstance(given, bool) or not isinstance(given, (int, float)):
            raise ConfigError(f"{path}: expected a number")
        if isinstance(default, int) and not isinstance(default, bool):
            if isinstance(given, float) and not given.is_integer():
                raise ConfigError(f"{path}: expected an integer")
            return int(given)
        return float(given)
    if isinstance(default, str):
        if not isinstance(given, str):
            raise ConfigError(f"{path}: expected a string")
        return given
    if isinstance(default, list):
        if not isinstance(given, list):
            raise ConfigError(f"{path}: expected a list")
        if default:
            return [_merge(default[0], g, f"{path}[{i}]") for i, g in enumerate(given)]
        return list(given)
    return given


def _require(cond, path, message):
    if not cond:
        raise ConfigError(f"{path}: {message}")


def _validate(command, cfg):
    _require(cfg["seed"] >= 0, "seed", "must be non-negative")
    if command == "theory":
        for name in cfg["checks"]:
            _require(name in ("closed_form", "dichotomy", "norm_bound"), "checks", f"unknown check {name!r}")
        _require(cfg["closed_form"]["instances"] >= 1, "closed_form.instances", "must be >= 1")
        _require(all(t >= 0 for t in cfg["closed_form"]["steps"]), "closed_form.steps", "must be >= 0")
        _require(cfg["dichotomy"]["below"] < 1.0 < cfg["dichotomy"]["above"], "dichotomy",
                 "need below < 1 < above")
        _require(cfg["norm_bound"]["trials"] >= 2, "norm_bound.trials", "must be >= 2")
        _require(cfg["norm_bound"]["sigma"] >= 0, "norm_bound.sigma", "must be >= 0")
    elif command == "concentration":
        _require(0.0 < cfg["delta"] < 1.0, "delta", "must lie in (0, 1)")
        _require(all(0.0 <= p <= 1.0 for p in cfg["ps"]), "ps", "must lie in [0, 1]")
        _require(cfg["trials"] >= 1, "trials", "must be >= 1")
        _require(cfg["n"] >= 1 and cfg["d"] >= 1, "n", "dimensions must be positive")
        _require(0.0 <= cfg["tail"]["p"] <= 1.0, "tail.p", "must lie in [0, 1]")
        _require(cfg["tail"]["trials"] >= 1, "tail.trials", "must be >= 1")
    elif command in ("sweep", "probe"):
        _require(cfg["ratios"] and all(0.0 < r <= 1.0 for r in cfg["ratios"]), "ratios",
                 "must be non-empty and lie in (0, 1]")
        _require(cfg["learning_rates"] and all(lr > 0 for lr in cfg["learning_rates"]),
                 "learning_rates", "must be non-empty and positive")
        _require(cfg["seeds"] >= 1, "seeds", "must be >= 1")
        if command == "sweep":
            _require(cfg["method"] in METHODS, "method", f"unknown method {cfg['method']!r}")
            _require(cfg["mask_mode"] in ("exact-count", "bernoulli"), "mask_mode", "unknown mode")
            _require(cfg["train"]["optimizer"] in ("sgd", "adamw"), "train.optimizer", "unknown optimizer")
            _require(cfg["train"]["epochs"] >= 0, "train.epochs", "must be >= 0")
            _require(cfg["train"]["batch_size"] >= 1, "train.batch_size", "must be >= 1")
        else:
            _require(len(cfg["ratios"]) >= 2, "ratios", "need at least two ratios")
            _require(cfg["compare_ratio"] in cfg["ratios"], "compare_ratio", "must be one of ratios")
            grid = cfg["epoch_grid"]
            _require(grid == sorted(grid), "epoch_grid", "must be ascending")
    for key, value in _walk(cfg):
        _require(not (isinstance(value, float) and not math.isfinite(value)), key, "must be finite")
    return cfg


def _walk(obj, prefix=""):
    if isinstance(obj, dict):
        for k, v in obj.items():
            yield from _walk(v, f"{prefix}.{k}" if prefix else k)
    elif isinstance(obj, list):
        for i, v in enumerate(obj):
            yield from _walk(v, f"{prefix}[{i}]")
    else:
        yield prefix, obj


def resolve(command: str, given: dict | None = None) -> dict:
    """Defaults for ``command`` overlaid with ``given``, validated."""
    if command not in DEFAULTS:
        raise ConfigError(f"unknown subcommand {command!r}")
    return _validate(command, _merge(DEFAULTS[command], given or {}, ""))


def load(command: str, path) -> dict:
    """Read a config file, or the config embedded in a previous run's manifest."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}")
    if isinstance(raw, dict) and "manifest" in raw and "config" in raw.get("manifest", {}):
        raw = raw["manifest"]
    if isinstance(raw, dict) and {"subcommand", "config"} <= set(raw):
        if raw["subcommand"] != command:
            raise ConfigError(f"manifest is for {raw['subcommand']!r}, not {command!r}")
        raw = raw["config"]
    return resolve(command, raw)
