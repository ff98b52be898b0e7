#!/usr/bin/env python3
"""
Run configuration: a JSON document with sections model, grid, mode, numerics,
verify, plot, input and output. Unknown keys anywhere are errors; defaults
come from config.py and the resolved document (seed included) is what gets
echoed next to the artifacts.
"""

import json
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Dict, List, Optional

from config import (
    BETA_PRIME_AT_ZERO,
    DEFAULT_N_SAMPLES,
    DEFAULT_SEED,
    MAX_WORKERS,
    SOLVER_TOL,
    STAGNATION_WINDOW,
    TOL_SAMPLED,
)
from model_core import ConfigError
from stopping import default_schedule

MODES = ("td", "stationary", "stopping", "impulse", "entry-exit", "characteristics", "verify", "hypcheck", "reduce")
DEFINITIONS = ("stationary", "td", "stopping", "stopping-td", "impulse", "phi-monotone", "entry-exit")


@dataclass
class ModelSection:
    name: str = "linear-test"
    params: Dict[str, Any] = field(default_factory=dict)
    jump_costs: Optional[List[List[Any]]] = None


@dataclass
class GridSection:
    d: Optional[int] = None
    R: Optional[float] = None
    h: Optional[float] = None


@dataclass
class NumericsSection:
    seed: int = DEFAULT_SEED
    tol: float = SOLVER_TOL
    dt: Optional[float] = None
    t_f: Optional[float] = None
    store_every: int = 1
    eps: Optional[float] = None
    eps_schedule: List[float] = field(default_factory=default_schedule)
    beta_prime_at_zero: float = BETA_PRIME_AT_ZERO
    eps_visc: float = 0.0
    window: int = STAGNATION_WINDOW
    force: bool = False
    y0: Optional[List[float]] = None
    z: Optional[List[float]] = None
    post_exit_x: Optional[List[float]] = None


@dataclass
class VerifySection:
    definition: Optional[str] = None
    tol: float = TOL_SAMPLED
    n_samples: int = DEFAULT_N_SAMPLES
    phi: Optional[Dict[str, Any]] = None
    monitor: bool = True
    lipschitz_alpha: Optional[float] = None
    lipschitz_t: float = 0.0


@dataclass
class PlotSection:
    enabled: bool = True
    index: int = -1
    slice_axis: Optional[int] = None
    slice_value: float = 0.0


@dataclass
class InputSection:
    field: Optional[str] = None


@dataclass
class OutputSection:
    dir: str = "output"
    prefix: str = "run"
    binary: bool = False
    workbook: bool = True


@dataclass
class RunConfig:
    mode: str
    model: ModelSection = field(default_factory=ModelSection)
    grid: GridSection = field(default_factory=GridSection)
    numerics: NumericsSection = field(default_factory=NumericsSection)
    verify: VerifySection = field(default_factory=VerifySection)
    plot: PlotSection = field(default_factory=PlotSection)
    input: InputSection = field(default_factory=InputSection)
    output: OutputSection = field(default_factory=OutputSection)
    workers: int = MAX_WORKERS

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def save(self, path: str) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2)


SECTIONS = {
    "model": ModelSection,
    "grid": GridSection,
    "numerics": NumericsSection,
    "verify": VerifySection,
    "plot": PlotSection,
    "input": InputSection,
    "output": OutputSection,
}


def _section(name: str, cls, data: Any):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"section '{name}' must be an object", module="cli")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown keys in '{name}': {unknown}", module="cli", witness={"keys": unknown})
    try:
        return cls(**data)
    except TypeError as e:
        raise ConfigError(f"bad section '{name}': {e}", module="cli") from e


def _require(condition: bool, message: str) -> None:
    if not condition:
        raise ConfigError(message, module="cli")


def validate(cfg: RunConfig) -> RunConfig:
    """Check that every field the mode needs is present."""
    _require(cfg.mode in MODES, f"unknown mode '{cfg.mode}' (known: {list(MODES)})")
    _require(cfg.workers >= 1, f"workers must be >= 1, got {cfg.workers}")
    num = cfg.numerics
    grid_needed = cfg.mode in ("td", "stationary", "stopping", "impulse")
    if grid_needed:
        _require(None not in (cfg.grid.d, cfg.grid.R, cfg.grid.h), f"mode '{cfg.mode}' needs grid.d, grid.R, grid.h")
    if cfg.mode == "entry-exit":
        _require(cfg.model.name == "entry-exit", "mode 'entry-exit' needs model.name = 'entry-exit'")
        _require(cfg.grid.h is not None, "mode 'entry-exit' needs grid.h")
    if cfg.mode == "td":
        _require(num.t_f is not None and num.dt is not None, "mode 'td' needs numerics.t_f and numerics.dt")
    if cfg.mode == "characteristics":
        _require(num.t_f is not None and num.dt is not None,
                 "mode 'characteristics' needs numerics.t_f and numerics.dt")
        _require((num.y0 is None) != (num.z is None), "mode 'characteristics' needs exactly one of y0, z")
    if cfg.mode == "stopping" and num.t_f is not None:
        _require(num.dt is not None, "time-dependent stopping needs numerics.dt")
    if cfg.mode == "impulse":
        _require(cfg.model.jump_costs is not None, "mode 'impulse' needs model.jump_costs")
    if cfg.mode in ("verify", "reduce"):
        _require(cfg.input.field is not None, f"mode '{cfg.mode}' needs input.field")
    if cfg.mode == "verify":
        _require(cfg.verify.definition in DEFINITIONS,
                 f"verify.definition must be one of {list(DEFINITIONS)}, got {cfg.verify.definition}")
        if cfg.verify.definition == "impulse":
            _require(cfg.model.jump_costs is not None, "impulse verification needs model.jump_costs")
        if cfg.verify.definition == "phi-monotone":
            _require(cfg.verify.phi is not None, "phi-monotone verification needs verify.phi")
    _require(num.store_every >= 1, "numerics.store_every must be >= 1")
    _require(cfg.verify.n_samples >= 1, "verify.n_samples must be >= 1")
    return cfg


def parse_config(data: Dict[str, Any]) -> RunConfig:
    """Build and validate a RunConfig from a parsed JSON document."""
    if not isinstance(data, dict):
        raise ConfigError("run config must be a JSON object", module="cli")
    known = set(SECTIONS) | {"mode", "workers"}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown top-level keys: {unknown}", module="cli", witness={"keys": unknown})
    _require("mode" in data, "run config needs a mode")
    sections = {name: _section(name, cls, data.get(name)) for name, cls in SECTIONS.items()}
    cfg = RunConfig(mode=data["mode"], workers=int(data.get("workers", MAX_WORKERS)), **sections)
    return validate(cfg)


def load_config(path: str) -> RunConfig:
    try:
        with open(path, "r") as f:
            data = json.load(f)
    except FileNotFoundError as e:
        raise ConfigError(f"config file not found: {path}", module="cli") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path} is not valid JSON: {e}", module="cli") from e
    return parse_config(data)
