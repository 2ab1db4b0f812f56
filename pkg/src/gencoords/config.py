"""JSON run configuration: defaults, validation and model construction."""

from __future__ import annotations

import copy
import json
from pathlib import Path

import numpy as np

from .errors import ConfigError, GenCoordsError
from .flow import ModelSpec, custom, linear, lorenz, lotka_volterra
from .noise import KernelSpec

SCENARIOS = ("linear1d", "linear2d", "lotka_volterra", "lorenz", "custom")
SIM_METHODS = ("zigzag", "zigzag_linear", "euler")

# the least-action sweep uses a slow damped rotation so that its Taylor
# polynomial stays accurate over the whole window
LINEAR2D_A = [[-0.125, 0.25], [-0.25, -0.125]]

SCENARIO_DEFAULTS = {
    "linear1d": {"model": {"A": [[-1.0]]}, "z": [1.0]},
    "linear2d": {"model": {"A": LINEAR2D_A}, "z": [10.0, 10.0]},
    "lotka_volterra": {"model": {"alpha": 1.0, "beta": 1.0, "gamma": 1.0, "delta": 1.0}, "z": [0.5, 1.0]},
    "lorenz": {"model": {"sigma": 10.0, "rho": 28.0, "beta": 8.0 / 3.0, "time_scale": 1.0}, "z": [1.0, 1.0, 1.0]},
    "custom": {"model": {}, "z": None},
}

DEFAULTS = {
    "simulate": {
        "scenario": "linear1d",
        "kernel": {"family": "gaussian", "sigma": 1.0, "scale": 1.0},
        "N": 10,
        "dt": 0.01,
        "T": 1.0,
        "seed": 0,
        "ensemble": 8,
        "method": "zigzag",
        "euler_dt": 1e-3,
        "blowup_bound": 1e6,
    },
    "least-action": {
        "scenario": "linear2d",
        "kernel": {"family": "gaussian", "sigma": 0.5, "scale": 1.0},
        "N": 3,
        "lambdas": [1.0, 10.0, 100.0],
        "mode": "linear",
        "dt": 1e-4,
        "T": 2.0,
        "output_every": 100,
    },
    "filter": {
        "scenario": "lorenz",
        "model": {"time_scale": 1.0 / 32.0},
        "z": [-5.9, -5.5, 24.5],
        "obs": "sum",
        "N": 6,
        "M": 6,
        "kernel_w": {"family": "gaussian", "sigma": 0.5, "scale": 1.0},
        "kernel_z": {"family": "gaussian", "sigma": 0.5, "scale": 0.01},
        "lambda": 1.0,
        "mode": "linear",
        "dt_obs": 0.25,
        "dt_integrate": 1e-3,
        "dt_sim": 0.01,
        "T": 128.0,
        "seed": 0,
        "synthetic": True,
        "data_path": None,
        "embedding": "inverse_taylor",
        "select_order": None,
        "mu0": "prior",
    },
    "linear-analysis": {
        "scenario": "linear2d",
        "model": {"A": [[-1.0, 0.5], [-0.5, -1.0]]},
        "z": [1.0, 1.0],
        "kernel": {"family": "gaussian", "sigma": 1.0, "scale": 1.0},
        "N": 12,
        "dt": 0.05,
        "T": 1.0,
        "R": 1.0,
    },
}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def resolve(command: str, user: dict) -> dict:
    """Layer scenario defaults, command defaults and the user's document."""
    if command not in DEFAULTS:
        raise ConfigError("command", f"unknown command {command!r}")
    if not isinstance(user, dict):
        raise ConfigError("config", "top level must be a JSON object")
    cfg = copy.deepcopy(DEFAULTS[command])
    scenario = user.get("scenario", cfg["scenario"])
    if scenario not in SCENARIOS:
        raise ConfigError("scenario", f"must be one of {SCENARIOS}, got {scenario!r}")
    if scenario != cfg["scenario"]:
        # command defaults for model/z only apply to the default scenario
        cfg.pop("model", None)
        cfg.pop("z", None)
    cfg = _merge(_merge(SCENARIO_DEFAULTS[scenario], cfg), user)
    cfg["scenario"] = scenario
    validate(command, cfg)
    return cfg


def load(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError("config", f"file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError("config", f"invalid JSON: {exc}") from exc


def _positive(cfg, key):
    v = cfg.get(key)
    if not isinstance(v, (int, float)) or isinstance(v, bool) or not v > 0 or not np.isfinite(v):
        raise ConfigError(key, f"must be a positive number, got {v!r}")


def _non_negative(cfg, key):
    v = cfg.get(key)
    if not isinstance(v, (int, float)) or isinstance(v, bool) or not v >= 0 or not np.isfinite(v):
        raise ConfigError(key, f"must be a non-negative number, got {v!r}")


def _int_at_least(cfg, key, low):
    v = cfg.get(key)
    if not isinstance(v, int) or isinstance(v, bool) or v < low:
        raise ConfigError(key, f"must be an integer >= {low}, got {v!r}")


def validate(command: str, cfg: dict):
    if command == "simulate":
        _positive(cfg, "dt")
        _non_negative(cfg, "T")
        _int_at_least(cfg, "N", 1)
        _int_at_least(cfg, "ensemble", 1)
        _int_at_least(cfg, "seed", 0)
        _positive(cfg, "euler_dt")
        _positive(cfg, "blowup_bound")
        if cfg["method"] not in SIM_METHODS:
            raise ConfigError("method", f"must be one of {SIM_METHODS}, got {cfg['method']!r}")
        if cfg["method"] == "euler":
            ratio = cfg["dt"] / cfg["euler_dt"]
            if abs(ratio - round(ratio)) > 1e-9 * ratio:
                raise ConfigError("euler_dt", "must divide dt")
            if cfg["kernel"].get("family", "gaussian") != "gaussian":
                raise ConfigError("kernel.family", "the Euler baseline needs a gaussian kernel")
    elif command == "least-action":
        _positive(cfg, "dt")
        _non_negative(cfg, "T")
        _int_at_least(cfg, "N", 1)
        _int_at_least(cfg, "output_every", 1)
        lams = cfg.get("lambdas")
        if not isinstance(lams, list) or not lams or not all(isinstance(x, (int, float)) and x > 0 for x in lams):
            raise ConfigError("lambdas", "must be a non-empty list of positive numbers")
        _mode(cfg)
    elif command == "filter":
        _int_at_least(cfg, "N", 1)
        _int_at_least(cfg, "M", 0)
        if cfg["M"] > cfg["N"]:
            raise ConfigError("M", f"must not exceed N={cfg['N']}")
        for key in ("dt_obs", "dt_integrate", "dt_sim", "lambda"):
            _positive(cfg, key)
        _non_negative(cfg, "T")
        _int_at_least(cfg, "seed", 0)
        _mode(cfg)
        if cfg["embedding"] not in ("inverse_taylor", "finite_diff"):
            raise ConfigError("embedding", "must be 'inverse_taylor' or 'finite_diff'")
        if not cfg["synthetic"] and not cfg.get("data_path"):
            raise ConfigError("data_path", "required when synthetic is false")
        if cfg.get("mu0", "prior") not in ("prior", "pinv"):
            raise ConfigError("mu0", "must be 'prior' or 'pinv'")
        sel = cfg.get("select_order")
        if sel is not None and (not isinstance(sel, list) or not sel or not all(isinstance(n, int) and n >= 1 for n in sel)):
            raise ConfigError("select_order", "must be a non-empty list of positive integers")
    elif command == "linear-analysis":
        _positive(cfg, "dt")
        _non_negative(cfg, "T")
        _int_at_least(cfg, "N", 1)
        _positive(cfg, "R")
        if cfg["scenario"] not in ("linear1d", "linear2d"):
            raise ConfigError("scenario", "linear analysis needs a linear scenario")


def _mode(cfg):
    if cfg.get("mode") not in ("exact", "linear"):
        raise ConfigError("mode", f"must be 'exact' or 'linear', got {cfg.get('mode')!r}")


def build_kernel(spec: dict, field: str = "kernel") -> KernelSpec:
    try:
        family = spec.get("family", "gaussian")
        if family == "custom_series":
            return KernelSpec.custom_series(spec["coefficients"], radius=spec.get("radius", 0.5))
        return KernelSpec(family, sigma=float(spec.get("sigma", 1.0)), scale=float(spec.get("scale", 1.0)))
    except (GenCoordsError, KeyError, TypeError) as exc:
        raise ConfigError(field, str(exc)) from exc


def build_model(cfg: dict, obs=None) -> ModelSpec:
    scenario, params = cfg["scenario"], dict(cfg.get("model") or {})
    try:
        if scenario in ("linear1d", "linear2d"):
            model = linear(params["A"], obs=obs)
        elif scenario == "lotka_volterra":
            model = lotka_volterra(obs=obs, **params)
        elif scenario == "lorenz":
            model = lorenz(obs=obs, **params)
        else:
            if "flow" not in params:
                raise ConfigError("model.flow", "custom scenario needs a flow expression list")
            model = custom(params["flow"], obs=params.get("obs", obs))
    except ConfigError:
        raise
    except (GenCoordsError, KeyError, TypeError) as exc:
        raise ConfigError("model", str(exc)) from exc
    z = cfg.get("z")
    if z is None or len(z) != model.state_dim:
        raise ConfigError("z", f"initial condition must have length {model.state_dim}")
    return model
