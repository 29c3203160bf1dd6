"""Velocity-tracking, collision and smoothness objectives.

Every loss consumes a :class:`RolloutTrace` whose per-step quantities are
tape nodes stacked as ``(T, B, ...)``, plus a boolean ``alive`` mask.  Each
environment's loss is averaged over its own live steps, then the batch mean
is taken, so crashed episodes neither dominate nor vanish.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ContractViolation


@dataclass
class LossConfig:
    w_velocity: float = 1.0
    w_collision: float = 2.0
    w_accel: float = 0.015
    w_jerk: float = 0.003
    beta1: float = 0.1
    beta2: float = -5.0
    r_q: float = 0.2
    smooth_l1_beta: float = 1.0
    speed_range: tuple = (1.5, 12.0)

    def validate(self):
        if min(self.w_velocity, self.w_collision, self.w_accel, self.w_jerk) < 0:
            raise ContractViolation("loss weights must be >= 0")
        if self.r_q <= 0:
            raise ContractViolation("r_q must be > 0")
        lo, hi = self.speed_range
        if not 0 <= lo <= hi:
            raise ContractViolation("speed_range must satisfy 0 <= lo <= hi")


@dataclass
class RolloutTrace:
    """Stacked per-step rollout records.

    Node-valued fields (``vbar``, ``cmd``, ``d``, ``vc``) live on ``tape``;
    the rest are plain arrays kept for logging.
    """

    tape: ad.Tape | None
    vbar: object = None  # (T, B, 3) smoothed velocity after each step
    v_ref: np.ndarray | None = None  # (T, B, 3)
    cmd: object = None  # (T, B, 3) policy output
    d: object = None  # (T, B) clearance to the nearest obstacle
    vc: object = None  # (T, B) approach speed, >= 0
    alive: np.ndarray | None = None  # (T, B)
    dt: float = 1.0 / 15.0
    positions: np.ndarray | None = None  # (T + 1, B, 3)
    velocities: np.ndarray | None = None  # (T + 1, B, 3)
    yaws: np.ndarray | None = None  # (T + 1, B)
    accels: np.ndarray | None = None  # (T + 1, B, 3) realized acceleration
    commands: np.ndarray | None = None  # (T + 1, B, 3) world-frame command, row 0 zero
    status: list = field(default_factory=list)  # final status per env
    end_step: np.ndarray | None = None  # steps executed per env
    observations: list = field(default_factory=list)

    @property
    def T(self) -> int:
        return 0 if self.alive is None else self.alive.shape[0]

    @property
    def batch(self) -> int:
        return 0 if self.alive is None else self.alive.shape[1]

    @classmethod
    def from_arrays(cls, vbar=None, v_ref=None, cmd=None, d=None, vc=None, alive=None, dt=1.0 / 15.0, dtype=ad.WIDE):
        """Trace on a fresh tape from plain ``(T, B, ...)`` or ``(T, ...)`` arrays."""
        tape = ad.Tape(dtype)

        def lift(x, tail):
            if x is None:
                return None
            x = np.asarray(x, dtype=float)
            if x.ndim == tail + 1:
                x = x[:, None]
            return tape.const(x)

        out = cls(tape, lift(vbar, 1), None, lift(cmd, 1), lift(d, 0), lift(vc, 0), None, dt)
        if v_ref is not None:
            v = np.asarray(v_ref, dtype=float)
            out.v_ref = v[:, None] if v.ndim == 2 else v
        ref = next(x for x in (out.vbar, out.cmd, out.d, out.vc) if x is not None)
        shape = ref.value.shape[:2]
        out.alive = np.ones(shape, dtype=bool) if alive is None else np.asarray(alive, dtype=bool).reshape(shape)
        return out


def _masked_mean(per_step, mask: np.ndarray):
    """Mean over live steps per env, then over envs.  ``per_step`` is (T, B)."""
    counts = mask.sum(axis=0)
    w = mask / np.maximum(counts, 1)[None, :]
    w = w / mask.shape[1]
    return ad.sum(ad.where(mask, per_step, 0.0) * w)


def _tape(trace: RolloutTrace) -> ad.Tape:
    if trace.tape is None:
        raise ContractViolation("trace carries no tape")
    return trace.tape


def velocity_loss(trace: RolloutTrace, v_ref=None, beta: float = 1.0):
    """Mean smooth-L1 of ``|v_ref - vbar|`` over live steps."""
    if trace.T == 0:
        raise ContractViolation("velocity loss needs a nonempty trace")
    ref = trace.v_ref if v_ref is None else np.asarray(v_ref, dtype=float)
    err = ad.norm(ref - trace.vbar, axis=-1)
    return _masked_mean(ad.smooth_l1(err, beta), trace.alive)


def collision_step_terms(d, vc, cfg: LossConfig):
    """Per-step ``vc * max(1 - (d - r_q), 0)^2 + beta1 * softplus(beta2 * (d - r_q))``."""
    gap = d - cfg.r_q
    near = ad.square(ad.relu(1.0 - gap))
    soft = ad.softplus(gap * cfg.beta2) * cfg.beta1
    return vc * near + soft


def collision_loss(trace: RolloutTrace, cfg: LossConfig):
    if trace.T == 0:
        raise ContractViolation("collision loss needs a nonempty trace")
    return _masked_mean(collision_step_terms(trace.d, trace.vc, cfg), trace.alive)


def smoothness_losses(trace: RolloutTrace):
    """``(L_a, L_j)``: mean squared command norm and mean squared command jerk.

    Jerk uses consecutive pairs where both steps are live; with fewer than
    two live steps an environment contributes zero.
    """
    tape = _tape(trace)
    if trace.T == 0:
        zero = tape.const(0.0)
        return zero, zero
    la = _masked_mean(ad.sum(ad.square(trace.cmd), axis=-1), trace.alive)
    if trace.T < 2:
        return la, tape.const(0.0)
    diff = (trace.cmd[1:] - trace.cmd[:-1]) * (1.0 / trace.dt)
    pair = trace.alive[1:] & trace.alive[:-1]
    lj = _masked_mean(ad.sum(ad.square(diff), axis=-1), pair)
    return la, lj


@dataclass
class LossBreakdown:
    velocity: float
    collision: float
    accel: float
    jerk: float
    total: float

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in ("velocity", "collision", "accel", "jerk", "total")}


def combine(lv, lc, la, lj, cfg: LossConfig):
    """Weighted sum and breakdown of already-computed component losses."""
    total = lv * cfg.w_velocity + lc * cfg.w_collision + la * cfg.w_accel + lj * cfg.w_jerk
    f = lambda x: float(np.asarray(getattr(x, "value", x)))  # noqa: E731
    return total, LossBreakdown(f(lv), f(lc), f(la), f(lj), f(total))


def total_loss(trace: RolloutTrace, cfg: LossConfig):
    """Returns ``(scalar node, LossBreakdown)``."""
    lv = velocity_loss(trace, beta=cfg.smooth_l1_beta)
    lc = collision_loss(trace, cfg)
    la, lj = smoothness_losses(trace)
    return combine(lv, lc, la, lj, cfg)


def smooth_l1_value(e, beta: float = 1.0):
    """Plain numpy smooth-L1, handy for metrics."""
    e = np.abs(np.asarray(e, dtype=float))
    return np.where(e < beta, 0.5 * e * e / beta, e - 0.5 * beta)
