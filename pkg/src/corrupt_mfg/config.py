"""JSON configuration loading and validation.

A configuration file holds the model parameters either at top level or under
``"model"``, plus optional sections ``"solver"``, ``"grid"``, ``"simulate"``,
``"retro"`` and ``"carleman"``.  Every value is validated by the dataclass it
ends up in, and the fully resolved configuration (defaults filled in) is
available for the run manifest.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

from .model import ModelParams
from .solvers import SolverConfig

SECTIONS = ("model", "solver", "grid", "simulate", "retro", "carleman", "solve")
_MODEL_FIELDS = {f.name for f in fields(ModelParams)}
_SOLVER_FIELDS = {f.name for f in fields(SolverConfig)}


class ConfigError(ValueError):
    """Invalid or unreadable configuration."""


@dataclass
class LoadedConfig:
    params: ModelParams
    solver: SolverConfig
    grid_n: int = 33
    sections: dict[str, dict[str, Any]] = field(default_factory=dict)

    def resolved(self) -> dict[str, Any]:
        out = {"model": self.params.to_dict(), "solver": asdict(self.solver), "grid": {"n": self.grid_n}}
        for name, values in self.sections.items():
            out[name] = dict(values)
        return out


def parse_config(data: dict[str, Any], source: str = "<config>") -> LoadedConfig:
    if not isinstance(data, dict):
        raise ConfigError(f"{source}: top level must be a JSON object")
    model = dict(data.get("model", {}))
    for key, value in data.items():
        if key in _MODEL_FIELDS:
            model[key] = value
        elif key not in SECTIONS:
            raise ConfigError(f"{source}: unknown key {key!r}")
    for key in model:
        if key not in _MODEL_FIELDS:
            raise ConfigError(f"{source}: unknown model parameter {key!r}")
    try:
        params = ModelParams(**model)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{source}: {exc}") from None

    solver = dict(data.get("solver", {}))
    for key in solver:
        if key not in _SOLVER_FIELDS:
            raise ConfigError(f"{source}: unknown solver option {key!r}")
    try:
        solver_cfg = SolverConfig(**solver)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{source}: {exc}") from None

    grid = dict(data.get("grid", {}))
    n = grid.pop("n", 33)
    if grid:
        raise ConfigError(f"{source}: unknown grid option(s) {sorted(grid)}")
    if not isinstance(n, int) or n < 3:
        raise ConfigError(f"{source}: grid.n must be an integer >= 3, got {n!r}")
    sections = {k: dict(data[k]) for k in ("simulate", "retro", "carleman", "solve") if k in data}
    for name, values in sections.items():
        if not isinstance(values, dict):
            raise ConfigError(f"{source}: section {name!r} must be an object")
    return LoadedConfig(params, solver_cfg, n, sections)


def load_config(path: str | Path) -> LoadedConfig:
    """Read and validate a JSON configuration file."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: malformed JSON ({exc.msg} at line {exc.lineno})") from None
    return parse_config(data, str(path))
