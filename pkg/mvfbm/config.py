"""
Run configuration: a JSON file of flat dotted keys ({"grid.N": 256, "family.beta": 2.0}) validated by a
pydantic model tree. Precedence is flags > file > defaults; unknown keys are errors.
"""
from __future__ import annotations

import hashlib
import inspect
import json
import math
from pathlib import Path as FsPath
from typing import Any, Literal, Mapping, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from mvfbm.coefficients import FAMILIES, CoefficientSet, builtin_family
from mvfbm.errors import ConfigError, DomainError
from mvfbm.fractional import FBM_METHODS, CMControl, Density, TimeGrid, check_hurst
from mvfbm.harness import LadderSpec
from mvfbm.ldp import RateConfig
from mvfbm.multiscale import FrozenConfig, ScaleParams, SimConfig
from mvfbm.storage import read_density_csv


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class FamilyConfig(BaseModel):
    """Builtin family name plus its keyword parameters, checked against the family's signature."""

    model_config = ConfigDict(extra="allow")

    name: str = "linear_meanfield"

    @model_validator(mode="after")
    def _known_parameters(self):
        if self.name not in FAMILIES:
            raise ValueError(f"Unknown family: {self.name}. Choose from {list(FAMILIES)}")
        allowed = set(inspect.signature(FAMILIES[self.name]).parameters)
        for key, value in (self.model_extra or {}).items():
            if key not in allowed:
                raise ValueError(f"family {self.name} has no parameter {key!r}; choose from {sorted(allowed)}")
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ValueError(f"family parameter {key!r} must be a number, got {value!r}")
        return self

    def params(self) -> dict:
        return dict(self.model_extra or {})


class GridConfig(_Section):
    T: float = Field(1.0, gt=0)
    N: int = Field(128, ge=1)


class ScalesConfig(_Section):
    delta: float = Field(0.5, gt=0)
    eps: Optional[float] = Field(None, gt=0)
    ladder: list[float] = [0.5, 0.25, 0.125]
    eps_power: float = Field(1.5, gt=1)
    eps_ladder: Optional[list[float]] = None
    averaging_eps: list[float] = [0.1, 0.05, 0.025]
    blocks: list[float] = []
    replicas: int = Field(2000, ge=1)

    @model_validator(mode="after")
    def _ladder_ok(self):
        # LadderSpec raises DomainError (a ValueError) naming the scale parameters constraint
        LadderSpec(tuple(self.ladder), self.eps_power, None if self.eps_ladder is None else tuple(self.eps_ladder),
                   self.replicas, tuple(self.blocks))
        return self

    def single_eps(self) -> float:
        return self.eps if self.eps is not None else self.delta**self.eps_power


class SimSection(_Section):
    H: float = 0.75
    particles: int = Field(1000, ge=1)
    dim: int = Field(1, ge=1)
    substeps: Optional[int] = Field(None, ge=1)
    x0: float = 0.0
    y0: float = 0.0
    method: str = "cholesky"
    companion: Literal["shared", "independent"] = "shared"
    format: Literal["csv", "mvfb"] = "csv"

    @field_validator("H")
    @classmethod
    def _hurst(cls, v):
        return check_hurst(v, allow_half=True)

    @field_validator("method")
    @classmethod
    def _method(cls, v):
        if v not in FBM_METHODS:
            raise ValueError(f"unknown fBm method {v!r}; choose from {FBM_METHODS}")
        return v


class ControlConfig(_Section):
    """u-hat = amplitude * shape(s), v-hat = vamp constant; kind="file" reads a u-hat density CSV."""

    kind: Literal["zero", "constant", "linear", "sine", "file"] = "zero"
    amplitude: float = 0.0
    frequency: float = 1.0
    vamp: float = 0.0
    path: Optional[str] = None
    energy_bound: Optional[float] = Field(None, ge=0)

    @model_validator(mode="after")
    def _file_needs_path(self):
        if self.kind == "file" and not self.path:
            raise ValueError("control.kind='file' needs control.path")
        return self


class RateSection(_Section):
    radius: float = Field(1.0, ge=0)
    target: Optional[str] = None
    target_kind: Literal["path", "from-khat"] = "path"
    max_iter: int = Field(4000, ge=1)
    grad_tol: float = Field(1e-3, gt=0)
    path_tol: float = Field(1e-5, gt=0)
    rounds: int = Field(6, ge=1)
    exit_candidates: int = Field(8, ge=1)


class FrozenSection(_Section):
    horizon: float = Field(20.0, gt=0)
    dt: float = Field(0.005, gt=0)
    chains: int = Field(64, ge=1)
    burn_in: float = Field(0.25, ge=0, lt=1)


class ProbeSection(_Section):
    trials: int = Field(512, ge=0)
    scale: float = Field(2.0, gt=0)
    df: float = Field(3.0, gt=0)


class ConvergenceSection(_Section):
    kind: Literal["increment", "averaging", "controlled", "auxiliary", "moments"] = "increment"
    reference: Literal["averaged", "limit"] = "averaged"


class RunConfig(_Section):
    seed: int = Field(0, ge=0)
    threads: Optional[int] = Field(None, ge=1)
    output: Optional[str] = None
    family: FamilyConfig = FamilyConfig()
    grid: GridConfig = GridConfig()
    scales: ScalesConfig = ScalesConfig()
    sim: SimSection = SimSection()
    control: ControlConfig = ControlConfig()
    rate: RateSection = RateSection()
    frozen: FrozenSection = FrozenSection()
    probe: ProbeSection = ProbeSection()
    convergence: ConvergenceSection = ConvergenceSection()

    # --- builders for the library objects ---

    def coefficients(self) -> CoefficientSet:
        return builtin_family(self.family.name, **self.family.params())

    def time_grid(self) -> TimeGrid:
        return TimeGrid(self.grid.T, self.grid.N)

    def sim_config(self) -> SimConfig:
        return SimConfig(self.time_grid(), H=self.sim.H, particles=self.sim.particles, substeps=self.sim.substeps,
                         seed=self.seed, x0=self.sim.x0, y0=self.sim.y0, method=self.sim.method)

    def scale_params(self) -> ScaleParams:
        return ScaleParams(self.scales.delta, self.scales.single_eps())

    def ladder(self) -> LadderSpec:
        s = self.scales
        eps = None if s.eps_ladder is None else tuple(s.eps_ladder)
        return LadderSpec(tuple(s.ladder), s.eps_power, eps, s.replicas, tuple(s.blocks))

    def rate_config(self, workers: int = 1) -> RateConfig:
        r = self.rate
        return RateConfig(max_iter=r.max_iter, grad_tol=r.grad_tol, path_tol=r.path_tol, rounds=r.rounds,
                          exit_candidates=r.exit_candidates, workers=workers)

    def frozen_config(self) -> FrozenConfig:
        f = self.frozen
        return FrozenConfig(horizon=f.horizon, dt=f.dt, chains=f.chains, burn_in=f.burn_in, seed=self.seed)

    def control_for(self, c: CoefficientSet, grid: Optional[TimeGrid] = None) -> CMControl:
        grid = grid or self.time_grid()
        spec = self.control
        s = grid.midpoints[:, None]
        if spec.kind == "file":
            uhat = read_density_csv(spec.path, grid.T)
            if uhat.grid != grid or uhat.dim != c.n:
                raise DomainError(f"{spec.path}: control density does not match the {c.n}-dim grid N={grid.N}")
        else:
            shape = {
                "zero": np.zeros_like(s),
                "constant": np.ones_like(s),
                "linear": s,
                "sine": np.sin(2.0 * math.pi * spec.frequency * s),
            }[spec.kind]
            uhat = Density(grid, np.repeat(spec.amplitude * shape, c.n, axis=1))
        vhat = Density.constant(grid, spec.vamp, c.m)
        return CMControl(uhat, vhat)


# --- flat <-> nested ------------------------------------------------------------------------


def _nest(flat: Mapping[str, Any]) -> dict:
    nested: dict = {}
    for key, value in flat.items():
        if not isinstance(key, str) or not key:
            raise ConfigError(f"config keys must be non-empty strings, got {key!r}")
        parts = key.split(".")
        node = nested
        for i, part in enumerate(parts[:-1]):
            child = node.setdefault(part, {})
            if not isinstance(child, dict):
                raise ConfigError(f"{'.'.join(parts[: i + 1])}: is a value and cannot hold {key}")
            node = child
        leaf = parts[-1]
        if isinstance(node.get(leaf), dict) and not isinstance(value, dict):
            raise ConfigError(f"{key}: is a section and cannot hold a value")
        if isinstance(value, dict):
            node.setdefault(leaf, {}).update(_nest(value))
        else:
            node[leaf] = value
    return nested


def _flatten(nested: Mapping[str, Any], prefix: str = "") -> dict:
    flat = {}
    for key, value in nested.items():
        name = f"{prefix}{key}"
        if isinstance(value, dict):
            flat.update(_flatten(value, name + "."))
        else:
            flat[name] = value
    return flat


def _format_validation(err: ValidationError) -> str:
    lines = []
    for e in err.errors():
        loc = ".".join(str(p) for p in e["loc"]) or "<root>"
        lines.append(f"{loc}: {e['msg']}")
    return "; ".join(lines)


def build_config(flat: Mapping[str, Any]) -> RunConfig:
    try:
        return RunConfig.model_validate(_nest(flat))
    except ValidationError as e:
        raise ConfigError(_format_validation(e)) from e


def read_flat(path: Union[str, FsPath]) -> dict:
    text = FsPath(path).read_text(encoding="utf-8")
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}:{e.lineno}:{e.colno}: {e.msg}") from e
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    return _flatten(data)


def load_config(path: Optional[Union[str, FsPath]] = None, overrides: Optional[Mapping[str, Any]] = None) -> RunConfig:
    """File values over defaults, then overrides (flat dotted keys) over file values."""
    flat = read_flat(path) if path is not None else {}
    flat.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return build_config(flat)


def dump_config(cfg: RunConfig) -> dict:
    """Normalized flat form; build_config(dump_config(c)) reproduces c."""
    return dict(sorted(_flatten(cfg.model_dump(mode="json")).items()))


def config_hash(cfg: RunConfig) -> str:
    canonical = json.dumps(dump_config(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()
