"""Point-mass quadrotor with a delayed first-order acceleration response.

The realized acceleration chases the command issued ``round(tau/dt)`` steps
earlier with gain ``1 - exp(-lambda*dt)`` per step; position and velocity are
then integrated exactly for piecewise-constant acceleration.

:func:`step` only uses ``+``, ``-`` and ``*``, so it runs unchanged on numpy
arrays and on :class:`flowavoid.autodiff.Node` values.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation
from .scene import Scene, closest_distance

RUNNING, COLLIDED, OUT_OF_BOUNDS, REACHED = "running", "collided", "out_of_bounds", "reached"
YAW_MODES = ("velocity_aligned", "goal_aligned", "fixed")


@dataclass
class DynamicsConfig:
    dt: float = 1.0 / 15.0
    lambda_ctrl: float = 15.0
    tau: float = 2.0 / 15.0
    a_max: float = 10.0
    r_q: float = 0.2
    smoothing: float = 0.2
    yaw_rate_max: float = 3.0
    hold_speed: float = 0.3
    bounds_margin: float = 1.0

    def validate(self):
        if not self.dt > 0:
            raise ContractViolation("dt must be > 0")
        if not self.lambda_ctrl > 0:
            raise ContractViolation("lambda_ctrl must be > 0")
        if self.tau < 0:
            raise ContractViolation("tau must be >= 0")
        if not 0 < self.smoothing <= 1:
            raise ContractViolation("smoothing must lie in (0, 1]")
        if self.a_max <= 0 or self.r_q <= 0:
            raise ContractViolation("a_max and r_q must be > 0")

    @property
    def delay_steps(self) -> int:
        return int(round(self.tau / self.dt))

    @property
    def lag_gain(self) -> float:
        return 1.0 - math.exp(-self.lambda_ctrl * self.dt)


@dataclass
class QuadState:
    """Vehicle state; arrays may carry a leading batch dimension.

    ``pending`` holds commands still inside the actuation delay, oldest first.
    """

    p: object
    v: object
    a: object
    vbar: object
    yaw: object = 0.0
    pending: tuple = ()
    t: float = 0.0

    @classmethod
    def at_rest(cls, position, yaw=0.0, velocity=None, cfg: DynamicsConfig | None = None):
        cfg = cfg or DynamicsConfig()
        p = np.array(position, dtype=float)
        v = np.zeros_like(p) if velocity is None else np.array(velocity, dtype=float)
        pending = tuple(np.zeros_like(p) for _ in range(cfg.delay_steps))
        return cls(p, v, np.zeros_like(p), v.copy(), yaw, pending)


def decay_state(state: QuadState, tape, factor: float) -> QuadState:
    """Attenuate gradients flowing back through the kinematic states.

    Position, velocity and the smoothed velocity are scaled by ``factor`` in the
    backward sweep. The actuator states (realized acceleration and the delay
    buffer) pass through untouched, so a command's gradient reaches the
    velocity at full strength before any decay is applied.
    """
    return QuadState(
        tape.decay(state.p, factor),
        tape.decay(state.v, factor),
        state.a,
        tape.decay(state.vbar, factor),
        state.yaw,
        state.pending,
        state.t,
    )


def wrap_angle(x):
    """Wrap to (-pi, pi]."""
    y = np.mod(np.asarray(x, dtype=float) + np.pi, 2 * np.pi) - np.pi
    y = np.where(y == -np.pi, np.pi, y)
    return float(y) if np.ndim(y) == 0 else y


def step(state: QuadState, cmd, cfg: DynamicsConfig) -> QuadState:
    """Advance one control period.

    ``a+ = a + (1 - e^{-lambda dt}) (a_cmd_delayed - a)``, then
    ``v+ = v + a+ dt`` and ``p+ = p + v dt + a+ dt^2 / 2``; the smoothed
    velocity is an exponential moving average of ``v+``.
    """
    dt = cfg.dt
    if cfg.delay_steps:
        if len(state.pending) != cfg.delay_steps:
            raise ContractViolation(f"state carries {len(state.pending)} pending commands, need {cfg.delay_steps}")
        delayed = state.pending[0]
        pending = state.pending[1:] + (cmd,)
    else:
        delayed = cmd
        pending = ()
    a = state.a + (delayed - state.a) * cfg.lag_gain
    v = state.v + a * dt
    p = state.p + state.v * dt + a * (0.5 * dt * dt)
    vbar = state.vbar * (1.0 - cfg.smoothing) + v * cfg.smoothing
    return QuadState(p, v, a, vbar, state.yaw, pending, state.t + dt)


def update_yaw(state: QuadState, mode: str, goal_dir, cfg: DynamicsConfig):
    """Slew-limited yaw toward the motion direction, the goal, or nowhere.

    Works on scalars or batches; velocities are read numerically, so yaw
    never enters the autodiff tape.
    """
    if mode not in YAW_MODES:
        raise ContractViolation(f"unknown yaw mode {mode!r}")
    yaw = np.asarray(state.yaw, dtype=float)
    if mode == "fixed":
        return wrap_angle(yaw)
    if mode == "velocity_aligned":
        v = np.asarray(getattr(state.v, "value", state.v), dtype=float)
        vx, vy = v[..., 0], v[..., 1]
        target = np.where(np.hypot(vx, vy) < cfg.hold_speed, yaw, np.arctan2(vy, vx))
    else:
        g = np.asarray(goal_dir, dtype=float)
        if np.any(np.hypot(g[..., 0], g[..., 1]) == 0):
            raise ContractViolation("goal_dir must be nonzero in goal_aligned mode")
        target = np.arctan2(g[..., 1], g[..., 0])
    lim = cfg.yaw_rate_max * cfg.dt
    delta = np.clip(wrap_angle(target - yaw), -lim, lim)
    return wrap_angle(yaw + delta)


def check_termination(state: QuadState, scene: Scene, cfg: DynamicsConfig) -> str:
    """Collision (strictly closer than the vehicle radius) or leaving the world."""
    p = np.asarray(getattr(state.p, "value", state.p), dtype=float)
    d, _ = closest_distance(scene, p)
    if d < cfg.r_q:
        return COLLIDED
    if scene.ground_plane_z is not None and p[2] - scene.ground_plane_z < cfg.r_q:
        return COLLIDED
    if not scene.contains(p, cfg.bounds_margin):
        return OUT_OF_BOUNDS
    return RUNNING


def body_to_world(vec, yaw):
    """Rotate camera-frame vectors ``(..., 3)`` to world for (batched) yaw."""
    yaw = np.asarray(yaw, dtype=float)
    c, s = np.cos(yaw), np.sin(yaw)
    x, y, z = vec[..., 0], vec[..., 1], vec[..., 2]
    return np.stack([x * s + z * c, -x * c + z * s, -y], axis=-1)


def world_to_body(vec, yaw):
    yaw = np.asarray(yaw, dtype=float)
    c, s = np.cos(yaw), np.sin(yaw)
    x, y, z = vec[..., 0], vec[..., 1], vec[..., 2]
    return np.stack([x * s - y * c, -z, x * c + y * s], axis=-1)


def rotation_body_to_world(yaw) -> np.ndarray:
    """Batched ``(B, 3, 3)`` matrices ``M`` with ``world = body @ M``."""
    yaw = np.atleast_1d(np.asarray(yaw, dtype=float))
    c, s = np.cos(yaw), np.sin(yaw)
    M = np.zeros(yaw.shape + (3, 3))
    M[:, 0, 0], M[:, 0, 1] = s, -c
    M[:, 1, 2] = -1.0
    M[:, 2, 0], M[:, 2, 1] = c, s
    return M
