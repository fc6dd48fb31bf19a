"""Run configuration: nested dataclasses loaded from YAML with strict keys."""

from __future__ import annotations

import dataclasses
import types
import typing
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any

import yaml

from .loop import LoopConfig
from .mapping import EdgeConfig, MappingConfig
from .tracking import ResidualConfig


class ConfigError(ValueError):
    """Invalid or unknown configuration entry."""


@dataclass(frozen=True)
class DataConfig:
    dataset: str | None = None  # TUM-layout directory
    scene: str | None = None  # synthetic scene name (a, b, c, d, loop or full name)
    depth_scale: float = 5000.0
    max_dt: float = 0.02
    min_depth: float = 0.3
    max_depth: float = 7.0
    max_frames: int = 0  # 0 = all
    pyramid_levels: int = 4
    # camera used when a dataset directory has no intrinsics.yaml (Freiburg factory values)
    fx: float = 525.0
    fy: float = 525.0
    cx: float = 319.5
    cy: float = 239.5
    baseline: float = 0.075
    disparity_sigma: float = 0.5
    intensity_noise: float | None = None  # synthetic override; None keeps the scene default
    disparity_noise: float | None = None


@dataclass(frozen=True)
class BackendConfig:
    loop_closure: bool = True
    map_reuse: bool = True
    max_iterations: int = 50
    min_decrease: float = 1e-9
    max_views_stored: int = 60


@dataclass(frozen=True)
class SystemConfig:
    deterministic: bool = True
    seed: int = 0
    prior_jitter: float = 1e-3  # std of the first-frame prior perturbation (rad and m)
    # twist [w, v] right-multiplied onto every new keyframe pose; a test hook that
    # manufactures odometry drift of known size (zero in normal runs)
    keyframe_drift: tuple[float, ...] = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0)
    output: str = "out"


@dataclass(frozen=True)
class EvaluationConfig:
    runs: int = 5
    min_successes: int = 3
    modes: tuple[str, ...] = ("PS", "PD", "GIDS", "GIDD", "GIDD_FULL", "PS_GIDD", "PS_GDD")


@dataclass(frozen=True)
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    tracking: ResidualConfig = field(default_factory=ResidualConfig)
    edges: EdgeConfig = field(default_factory=EdgeConfig)
    mapping: MappingConfig = field(default_factory=MappingConfig)
    loop: LoopConfig = field(default_factory=LoopConfig)
    backend: BackendConfig = field(default_factory=BackendConfig)
    system: SystemConfig = field(default_factory=SystemConfig)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)

    def __post_init__(self) -> None:
        if len(self.tracking.max_iterations) != self.data.pyramid_levels:
            raise ConfigError("tracking.max_iterations needs one entry per pyramid level")
        if self.data.min_depth >= self.data.max_depth:
            raise ConfigError("data.min_depth must be below data.max_depth")
        if len(self.system.keyframe_drift) != 6:
            raise ConfigError("system.keyframe_drift needs six entries [wx, wy, wz, vx, vy, vz]")
        if self.evaluation.min_successes > self.evaluation.runs:
            raise ConfigError("evaluation.min_successes exceeds evaluation.runs")


def _coerce(tp, value, where: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if dataclasses.is_dataclass(tp):
        return from_dict(tp, value, where)
    if origin is typing.Union or origin is types.UnionType:
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(inner[0], value, where)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
        return tuple(_coerce(args[0], v, where) for v in value)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    return value


def from_dict(cls, data: dict | None, where: str = ""):
    """Build dataclass ``cls`` from a mapping; unknown keys raise :class:`ConfigError`."""
    data = {} if data is None else data
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'}: expected a mapping, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where or 'config'}: {', '.join(unknown)}")
    kwargs = {k: _coerce(hints[k], v, f"{where}.{k}" if where else k) for k, v in data.items()}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"{where or 'config'}: {exc}") from exc


def to_dict(obj) -> dict[str, Any]:
    def conv(v):
        if dataclasses.is_dataclass(v):
            return {f.name: conv(getattr(v, f.name)) for f in dataclasses.fields(v)}
        if isinstance(v, tuple):
            return [conv(x) for x in v]
        return v
    return conv(obj)


def merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for k, v in override.items():
        out[k] = merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def load_config(path: str | Path | None = None, overrides: dict | None = None) -> RunConfig:
    """Defaults, then the YAML file at ``path``, then ``overrides``."""
    data: dict = {}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        try:
            data = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"invalid YAML in {path}: {exc}") from exc
    if overrides:
        data = merge(data, overrides)
    return from_dict(RunConfig, data)


def dump_config(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(to_dict(cfg), sort_keys=False))


def default_config_text() -> str:
    return resources.files("rgbdslam").joinpath("default_config.yaml").read_text()
