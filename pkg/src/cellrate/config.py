"""Run configuration: strict validation of JSON run files."""

from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Optional

from .errors import ConfigError
from .fairness import Utility
from .geometry import Scenario, scenario_from_config
from .limitcore import DEFAULT_TOL, Tolerances

TASKS = ("solve_fairness", "sum_rate", "validate_mc", "dynamic_sim", "sweep")
MC_TASKS = ("validate_mc", "dynamic_sim")
LAMBDA_MODES = ("sum_power_relax", "symmetric_shortcut", "gradient_descent")
TOP_KEYS = {"scenario", "task", "utility", "lambda_mode", "log_base", "output_dir", "seed",
            "tolerances", "conv_tol", "max_outer", "weights", "N", "trials", "T", "V", "A_max",
            "sweep"}
SWEEP_KEYS = {"parameter", "values", "task"}


@dataclass
class RunConfig:
    """Validated run description; ``raw`` is the resolved mapping echoed in outputs."""

    scenario: Scenario
    task: str
    utility: Utility = field(default_factory=Utility)
    lambda_mode: str = "sum_power_relax"
    log_base: str = "bits"
    output_dir: Optional[str] = None
    seed: Optional[int] = None
    tolerances: Tolerances = DEFAULT_TOL
    conv_tol: float = 1e-4
    max_outer: int = 2000
    weights: Optional[list] = None
    N: int = 16
    trials: int = 200
    T: int = 5000
    V: Optional[float] = None
    A_max: Optional[float] = None
    sweep: Optional[dict] = None
    raw: dict = field(default_factory=dict)

    @property
    def needs_seed(self) -> bool:
        task = self.sweep["task"] if self.task == "sweep" else self.task
        return task in MC_TASKS


def _number(value, name, lo=None, hi=None, integer=False, lo_open=False):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{name} must be a number")
    if integer and (not float(value).is_integer()):
        raise ConfigError(f"{name} must be an integer")
    v = int(value) if integer else float(value)
    if not math.isfinite(v):
        raise ConfigError(f"{name} must be finite")
    if lo is not None and (v <= lo if lo_open else v < lo):
        raise ConfigError(f"{name} must be {'>' if lo_open else '>='} {lo}")
    if hi is not None and v > hi:
        raise ConfigError(f"{name} must be <= {hi}")
    return v


def _utility(spec) -> Utility:
    if isinstance(spec, str):
        spec = {"kind": spec}
    if not isinstance(spec, dict):
        raise ConfigError("utility must be a name or a mapping")
    unknown = set(spec) - {"kind", "alpha"}
    if unknown:
        raise ConfigError(f"unknown utility keys: {sorted(unknown)}")
    try:
        alpha = _number(spec.get("alpha", 1.0), "utility.alpha", 0.0, lo_open=True)
        return Utility(spec.get("kind", "pfs"), alpha)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _tolerances(spec) -> Tolerances:
    if spec is None:
        return DEFAULT_TOL
    if not isinstance(spec, dict):
        raise ConfigError("tolerances must be a mapping")
    allowed = {"fp_tol", "kkt_tol", "grad_tol", "num_tol", "max_iter"}
    unknown = set(spec) - allowed
    if unknown:
        raise ConfigError(f"unknown tolerance keys: {sorted(unknown)}")
    vals = {}
    for k, v in spec.items():
        if k == "max_iter":
            vals[k] = _number(v, k, 1, 10_000_000, integer=True)
        else:
            vals[k] = _number(v, k, 0.0, 1.0, lo_open=True)
    return replace(DEFAULT_TOL, **vals)


def load_json(path) -> Any:
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc


def resolve(cfg: dict, base_dir=".") -> dict:
    """Inline a scenario given by file name; returns a deep copy."""
    cfg = copy.deepcopy(cfg)
    scen = cfg.get("scenario")
    if isinstance(scen, str):
        cfg["scenario"] = load_json(Path(base_dir) / scen)
    return cfg


def set_path(cfg: dict, dotted: str, value) -> dict:
    """Copy of ``cfg`` with the dotted key path set to ``value``."""
    out = copy.deepcopy(cfg)
    node = out
    keys = dotted.split(".")
    for k in keys[:-1]:
        if not isinstance(node.get(k), dict):
            node[k] = {}
        node = node[k]
    node[keys[-1]] = value
    return out


def parse_config(cfg: dict, base_dir=".", seed: Optional[int] = None,
                 output_dir: Optional[str] = None) -> RunConfig:
    """Validate a run mapping.  ``seed``/``output_dir`` override the file."""
    if not isinstance(cfg, dict):
        raise ConfigError("run config must be a mapping")
    unknown = set(cfg) - TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    if "scenario" not in cfg:
        raise ConfigError("config needs a scenario")
    cfg = resolve(cfg, base_dir)
    if seed is not None:
        cfg["seed"] = seed
    if output_dir is not None:
        cfg["output_dir"] = output_dir
    task = cfg.get("task", "solve_fairness")
    if task not in TASKS:
        raise ConfigError(f"unknown task {task!r}; expected one of {TASKS}")
    cfg["task"] = task
    try:
        scenario = scenario_from_config(cfg["scenario"])
    except ConfigError:
        raise
    except (ValueError, TypeError, KeyError) as exc:
        raise ConfigError(f"invalid scenario: {exc}") from exc
    lambda_mode = cfg.get("lambda_mode", "sum_power_relax")
    if lambda_mode not in LAMBDA_MODES:
        raise ConfigError(f"unknown lambda_mode {lambda_mode!r}")
    log_base = cfg.get("log_base", "bits")
    if log_base not in ("bits", "nats"):
        raise ConfigError("log_base must be 'bits' or 'nats'")
    rc = RunConfig(
        scenario=scenario, task=task, utility=_utility(cfg.get("utility", "pfs")),
        lambda_mode=lambda_mode, log_base=log_base, output_dir=cfg.get("output_dir"),
        tolerances=_tolerances(cfg.get("tolerances")), raw=cfg)
    if cfg.get("seed") is not None:
        rc.seed = _number(cfg["seed"], "seed", 0, 2**63 - 1, integer=True)
    if "conv_tol" in cfg:
        rc.conv_tol = _number(cfg["conv_tol"], "conv_tol", 0.0, 1.0, lo_open=True)
    if "max_outer" in cfg:
        rc.max_outer = _number(cfg["max_outer"], "max_outer", 1, 1_000_000, integer=True)
    if "N" in cfg:
        rc.N = _number(cfg["N"], "N", 1, 4096, integer=True)
    if "trials" in cfg:
        rc.trials = _number(cfg["trials"], "trials", 2, 10_000_000, integer=True)
    if "T" in cfg:
        rc.T = _number(cfg["T"], "T", 1, 100_000_000, integer=True)
    if cfg.get("V") is not None:
        rc.V = _number(cfg["V"], "V", 0.0, lo_open=True)
    if cfg.get("A_max") is not None:
        rc.A_max = _number(cfg["A_max"], "A_max", 0.0)
    if cfg.get("weights") is not None:
        w = cfg["weights"]
        if not isinstance(w, list) or len(w) != scenario.n_groups:
            raise ConfigError(f"weights must be a list of {scenario.n_groups} numbers")
        rc.weights = [_number(x, "weights[]", 0.0) for x in w]
    if task == "sweep":
        sw = cfg.get("sweep")
        if not isinstance(sw, dict):
            raise ConfigError("sweep task needs a sweep mapping")
        unknown = set(sw) - SWEEP_KEYS
        if unknown:
            raise ConfigError(f"unknown sweep keys: {sorted(unknown)}")
        if not isinstance(sw.get("parameter"), str) or not sw["parameter"]:
            raise ConfigError("sweep.parameter must be a dotted key path")
        if not isinstance(sw.get("values"), list) or not sw["values"]:
            raise ConfigError("sweep.values must be a nonempty list")
        sub = sw.get("task", "solve_fairness")
        if sub not in TASKS or sub == "sweep":
            raise ConfigError(f"invalid sweep task {sub!r}")
        rc.sweep = {"parameter": sw["parameter"], "values": list(sw["values"]), "task": sub}
        # every grid point must itself be valid
        for v in rc.sweep["values"]:
            point = set_path(cfg, rc.sweep["parameter"], v)
            point["task"] = sub
            point.pop("sweep", None)
            parse_config(point, base_dir)
    elif "sweep" in cfg:
        raise ConfigError("sweep section only allowed with task 'sweep'")
    if rc.needs_seed and rc.seed is None:
        raise ConfigError("a seed is required for Monte Carlo tasks")
    if rc.task in MC_TASKS:
        try:
            from .montecarlo import antennas_per_bs
            antennas_per_bs(scenario.gamma, rc.N)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    return rc
