"""Run configuration: nested dataclasses loaded from and saved to JSON.

Loading is strict: unknown keys, wrong types and invalid values all raise
:class:`ConfigError` naming the offending dotted path.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .dynamics import YAW_MODES, DynamicsConfig
from .errors import ConfigError, ContractViolation
from .flow import FlowNoiseConfig
from .losses import LossConfig
from .policy import ArchConfig
from .render import CameraIntrinsics
from .scene import GenConfig


@dataclass
class ObservationConfig:
    crop_fraction: float = 0.5
    flow_scale: float = 20.0
    yaw_mode: str = "velocity_aligned"

    def validate(self):
        if not 0 < self.crop_fraction <= 1:
            raise ContractViolation("crop_fraction must lie in (0, 1]")
        if self.flow_scale <= 0:
            raise ContractViolation("flow_scale must be > 0")
        if self.yaw_mode not in YAW_MODES:
            raise ContractViolation(f"yaw_mode must be one of {YAW_MODES}")


@dataclass
class TrainConfig:
    """Optimization schedule and episode sampling."""

    seed: int = 0
    iterations: int = 2000
    time_budget_s: float | None = None
    batch: int = 16
    horizon: int = 90
    lr: float = 1e-3
    grad_clip: float | None = 10.0
    alpha: float = 10.0
    speed_range: tuple = (1.5, 12.0)
    goal_distance_range: tuple = (20.0, 30.0)
    init_speed_fraction: tuple = (0.0, 1.0)
    scene_pool: int = 256
    spawn_clearance: float = 1.5
    checkpoint_every: int = 100
    log_every: int = 1
    max_nonfinite: int = 3
    precision: str = "narrow"

    def validate(self):
        if self.iterations < 0 or self.batch < 1 or self.horizon < 1:
            raise ContractViolation("iterations >= 0, batch >= 1 and horizon >= 1 required")
        if self.lr <= 0:
            raise ContractViolation("lr must be > 0")
        if self.alpha < 0:
            raise ContractViolation("alpha must be >= 0")
        lo, hi = self.speed_range
        if not 0 <= lo <= hi:
            raise ContractViolation("speed_range must be ordered and non-negative")
        lo, hi = self.goal_distance_range
        if not 0 < lo <= hi:
            raise ContractViolation("goal_distance_range must be positive and ordered")
        if self.precision not in ("narrow", "wide"):
            raise ContractViolation("precision must be 'narrow' or 'wide'")
        if self.scene_pool < 1 or self.spawn_clearance <= 0:
            raise ContractViolation("scene_pool >= 1 and spawn_clearance > 0 required")


@dataclass
class EvalConfig:
    episodes: int = 20
    speed: float = 3.0
    seed: int = 1_000_000
    goal_radius: float = 2.0
    time_factor: float = 2.0
    lateral_range: float = 10.0
    start_x: float = -18.0
    goal_x: float = 18.0
    altitude: float = 1.5

    def validate(self):
        if self.episodes < 1 or self.speed <= 0 or self.goal_radius <= 0 or self.time_factor <= 0:
            raise ContractViolation("episodes, speed, goal_radius and time_factor must be positive")


@dataclass
class Config:
    dynamics: DynamicsConfig = field(default_factory=DynamicsConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    arch: ArchConfig = field(default_factory=ArchConfig)
    camera: CameraIntrinsics = field(default_factory=CameraIntrinsics)
    observation: ObservationConfig = field(default_factory=ObservationConfig)
    scene: GenConfig = field(default_factory=GenConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    noise: FlowNoiseConfig = field(default_factory=FlowNoiseConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)  # noqa: A003

    def validate(self):
        for f in dataclasses.fields(self):
            sub = getattr(self, f.name)
            check = getattr(sub, "validate", None)
            if check is not None:
                try:
                    check()
                except ContractViolation as exc:
                    raise ConfigError(f"{f.name}: {exc}") from exc
        if self.arch.a_max > self.dynamics.a_max:
            raise ConfigError("arch.a_max must not exceed dynamics.a_max")
        return self


# ---------------------------------------------------------------------------
# dict conversion


def _to_plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_to_plain(v) for v in obj]
    if isinstance(obj, dict):
        return {k: _to_plain(v) for k, v in obj.items()}
    return obj


def to_dict(cfg) -> dict:
    return _to_plain(cfg)


def _coerce(value, default, path: str):
    """Match ``value`` to the type of ``default``."""
    if dataclasses.is_dataclass(default):
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected a table")
        return _build(type(default), value, path)
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)) or len(value) != len(default):
            raise ConfigError(f"{path}: expected a list of {len(default)}")
        return tuple(_coerce(v, d, f"{path}[{i}]") for i, (v, d) in enumerate(zip(value, default)))
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list")
        proto = default[0] if default else 0
        return [_coerce(v, proto, f"{path}[{i}]") for i, v in enumerate(value)]
    if isinstance(default, dict):
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected a table")
        return {k: _coerce(v, 0.0, f"{path}.{k}") for k, v in value.items()}
    if default is None:
        # optional fields default to None: accept null or a number
        if value is None or (isinstance(value, (int, float)) and not isinstance(value, bool)):
            return value
        raise ConfigError(f"{path}: expected a number or null")
    return value


def _build(cls, data: dict, path: str):
    proto = cls()
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        where = f"{path}." if path else ""
        raise ConfigError(f"unknown key(s): {', '.join(where + k for k in unknown)}")
    kwargs = {}
    for name in names:
        if name in data:
            default = getattr(proto, name)
            sub = f"{path}.{name}" if path else name
            val = data[name]
            if default is None or val is None:
                if val is not None and not isinstance(val, (int, float)) or isinstance(val, bool):
                    raise ConfigError(f"{sub}: expected a number or null")
                kwargs[name] = val
            else:
                kwargs[name] = _coerce(val, default, sub)
    try:
        return cls(**kwargs)
    except ContractViolation as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from exc


def from_dict(data: dict) -> Config:
    if not isinstance(data, dict):
        raise ConfigError("config root must be a table")
    return _build(Config, data, "").validate()


def load_config(path) -> Config:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
    return from_dict(data)


def save_config(cfg: Config, path) -> None:
    Path(path).write_text(json.dumps(to_dict(cfg), indent=2, sort_keys=True) + "\n")
