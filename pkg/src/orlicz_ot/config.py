"""Config files (TOML or JSON) and their translation into library objects."""
from __future__ import annotations

import copy
import hashlib
import json
import sys
from pathlib import Path

from .experiments import ProblemTemplate, Schedule
from .solvers import SolverConfig
from .young import from_spec

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

__all__ = ["ConfigError", "load", "apply_overrides", "config_hash", "problem_from_config", "template_from_config",
           "schedule_from_config", "solver_from_config"]

DEFAULT_LAMBDA = {"kind": "lebesgue"}


class ConfigError(ValueError):
    """Malformed or inconsistent config."""


def load(path) -> tuple:
    """``(mapping, raw_bytes)`` of a TOML or JSON file."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    raw = path.read_bytes()
    try:
        if path.suffix.lower() == ".json":
            data = json.loads(raw.decode())
        else:
            data = tomllib.loads(raw.decode())
    except (ValueError, UnicodeDecodeError) as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path} must contain a table at top level")
    return data, raw


def _parse_value(text: str):
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except ValueError:
        return text


def apply_overrides(cfg: dict, overrides) -> dict:
    """Apply ``dotted.key=value`` overrides; values are parsed as TOML literals when possible."""
    out = copy.deepcopy(cfg)
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, text = item.split("=", 1)
        parts = key.strip().split(".")
        node = out
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r} descends into a non-table")
        node[parts[-1]] = _parse_value(text.strip())
    return out


def config_hash(raw: bytes, overrides=()) -> str:
    h = hashlib.sha256(raw)
    for o in overrides or ():
        h.update(b"\0" + o.encode())
    return h.hexdigest()


def _require(cfg, key, where="config"):
    if key not in cfg:
        raise ConfigError(f"{where} is missing '{key}'")
    return cfg[key]


def _domains(cfg) -> tuple:
    dom = _require(cfg, "domain")
    try:
        x = tuple(float(v) for v in _require(dom, "x", "[domain]"))
        y = tuple(float(v) for v in dom.get("y", x))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad domain: {exc}") from exc
    if len(x) != 2 or len(y) != 2 or not (x[0] < x[1] and y[0] < y[1]):
        raise ConfigError("domain axes must be [lo, hi] with lo < hi")
    return x, y


def template_from_config(cfg: dict, base_dir=None) -> ProblemTemplate:
    try:
        reg = from_spec(_require(cfg, "regularizer"))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    mu1 = _require(cfg, "mu1")
    mu2 = cfg.get("mu2", mu1)
    lam1 = cfg.get("lambda1", DEFAULT_LAMBDA)
    lam2 = cfg.get("lambda2", lam1)
    cost = cfg.get("cost", {"kind": "sqeuclidean"})
    return ProblemTemplate(_domains(cfg), (mu1, mu2), (lam1, lam2), cost, reg,
                           int(cfg.get("quad_order", 3)), None if base_dir is None else str(base_dir))


def problem_from_config(cfg: dict, base_dir=None):
    from .grid import MeasureSpecError
    from .problem import ProblemError

    tmpl = template_from_config(cfg, base_dir)
    level, cells = cfg.get("level"), cfg.get("cells")
    if (level is None) == (cells is None):
        raise ConfigError("give exactly one of 'level' or 'cells'")
    try:
        gamma = float(_require(cfg, "gamma"))
        return tmpl.build(level=None if level is None else int(level), gamma=gamma,
                          cells=None if cells is None else int(cells))
    except (MeasureSpecError, ProblemError, KeyError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc


def solver_from_config(cfg: dict) -> SolverConfig:
    try:
        return SolverConfig.from_mapping(cfg.get("solver"))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad [solver] table: {exc}") from exc


def schedule_from_config(cfg: dict, base_dir=None) -> Schedule:
    rule = cfg.get("coupling_rule", "disc_strict")
    try:
        if "schedule_file" in cfg:
            path = Path(cfg["schedule_file"])
            if base_dir is not None and not path.is_absolute():
                path = Path(base_dir) / path
            if not path.is_file():
                raise ConfigError(f"schedule file not found: {path}")
            return Schedule.from_csv(path, rule)
        return Schedule.from_rows(cfg.get("schedule") or [], rule)
    except ConfigError:
        raise
    except (ValueError, KeyError, TypeError) as exc:
        raise ConfigError(f"bad schedule: {exc}") from exc


def section_or_file(cfg: dict, key: str, base_dir) -> tuple:
    """A nested table given inline or as a path to another config file; returns ``(table, base_dir)``."""
    val = _require(cfg, key)
    if isinstance(val, dict):
        return val, base_dir
    path = Path(val)
    if base_dir is not None and not path.is_absolute():
        path = Path(base_dir) / path
    data, _ = load(path)
    return data, path.parent
