"""Finite-difference validation of the tape gradients.

The check uses a small state-feedback policy ``u = a_max * tanh(W x + b)``
with ``x = [(p - goal) / 10, v / 5]`` driving the full vehicle model, so the
gradient flows through the policy, the delayed dynamics and every loss term.
Rendering is left out: depth-derived flow is piecewise constant in the pose
and would make finite differences meaningless.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .dynamics import DynamicsConfig, QuadState, decay_state, step
from .losses import LossConfig, RolloutTrace, collision_loss, combine, smoothness_losses, velocity_loss
from .rollout import SceneQuery
from .scene import Scene, sphere

STATE_DIM = 6


@dataclass
class GradCheckConfig:
    T: int = 20
    batch: int = 2
    alpha: float = 0.0
    collision: bool = False
    h: float = 1e-5
    seed: int = 0
    tolerance: float | None = None
    dynamics: DynamicsConfig = field(default_factory=DynamicsConfig)
    loss: LossConfig = field(default_factory=LossConfig)

    @property
    def n_params(self) -> int:
        return 3 * STATE_DIM + 3

    def threshold(self) -> float:
        if self.tolerance is not None:
            return self.tolerance
        return 1e-4 if self.collision else 1e-5


def _problem(cfg: GradCheckConfig):
    """Deterministic starts, goals and scene for the check."""
    rng = np.random.default_rng(cfg.seed)
    B = cfg.batch
    starts = np.column_stack([rng.uniform(-1, 1, B), rng.uniform(-1, 1, B), np.full(B, 1.5)])
    goals = starts + np.column_stack([np.full(B, 8.0), rng.uniform(-2, 2, B), np.zeros(B)])
    v0 = np.column_stack([rng.uniform(0.5, 2.0, B), rng.uniform(-0.5, 0.5, B), np.zeros(B)])
    if cfg.collision:
        # an obstacle just beside the straight path, inside the near-field band
        prims = (sphere((3.0, 1.3, 1.5), 0.6),)
    else:
        prims = ()
    scenes = [Scene(prims) for _ in range(B)]
    return scenes, starts, goals, v0


def init_theta(cfg: GradCheckConfig) -> np.ndarray:
    rng = np.random.default_rng(cfg.seed + 1)
    return rng.normal(0.0, 0.3, cfg.n_params)


def policy_loss(theta, cfg: GradCheckConfig, tape: ad.Tape | None = None):
    """Total loss node of the linear-policy rollout; the parameter is ``theta``."""
    tape = ad.Tape(ad.WIDE) if tape is None else tape
    th = tape.param("theta", np.asarray(theta, dtype=np.float64))
    W = ad.reshape(th[: 3 * STATE_DIM], (STATE_DIM, 3))
    b = th[3 * STATE_DIM :]
    dyn = cfg.dynamics
    scenes, starts, goals, v0 = _problem(cfg)
    query = SceneQuery(scenes)
    v_ref = (goals - starts) * np.array([1.0, 1.0, 0.0])
    v_ref = 3.0 * v_ref / np.linalg.norm(v_ref, axis=1, keepdims=True)
    state = QuadState.at_rest(starts, 0.0, v0, dyn)
    decay = float(np.exp(-cfg.alpha * dyn.dt))
    a_max = dyn.a_max
    vbar, cmds, ds, vcs = [], [], [], []
    for _ in range(cfg.T):
        state = decay_state(state, tape, decay)
        x = ad.concat([(state.p - goals) * 0.1, state.v * 0.2], axis=-1)
        u = ad.tanh(x @ W + b) * a_max
        state = step(state, u, dyn)
        vbar.append(state.vbar)
        cmds.append(u)
        if cfg.collision:
            d, n = query.on_tape(state.p)
            ds.append(d)
            vcs.append(ad.relu(ad.sum(state.v * n, axis=-1)))
    trace = RolloutTrace(tape, ad.stack(vbar), np.broadcast_to(v_ref, (cfg.T,) + v_ref.shape), ad.stack(cmds), dt=dyn.dt)
    trace.alive = np.ones((cfg.T, cfg.batch), dtype=bool)
    lv = velocity_loss(trace, beta=cfg.loss.smooth_l1_beta)
    la, lj = smoothness_losses(trace)
    if cfg.collision:
        trace.d, trace.vc = ad.stack(ds), ad.stack(vcs)
        lc = collision_loss(trace, cfg.loss)
    else:
        lc = tape.const(0.0)
    total, _ = combine(lv, lc, la, lj, cfg.loss)
    return total


def tape_gradient(theta, cfg: GradCheckConfig) -> np.ndarray:
    tape = ad.Tape(ad.WIDE)
    loss = policy_loss(theta, cfg, tape)
    return tape.backward(loss)["theta"]


def fd_gradient(theta, cfg: GradCheckConfig) -> np.ndarray:
    theta = np.asarray(theta, dtype=np.float64)
    g = np.zeros_like(theta)
    for i in range(theta.size):
        e = np.zeros_like(theta)
        e[i] = cfg.h
        hi = float(policy_loss(theta + e, cfg).value)
        lo = float(policy_loss(theta - e, cfg).value)
        g[i] = (hi - lo) / (2 * cfg.h)
    return g


def relative_errors(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``|a - b| / max(|a|, |b|, floor)`` with a floor tied to the gradient scale."""
    floor = 1e-6 * max(np.abs(a).max(), np.abs(b).max(), 1e-300)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


@dataclass
class GradCheckReport:
    max_relative_error: float
    threshold: float
    passed: bool
    per_parameter: list
    config: dict

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)


def grad_check(cfg: GradCheckConfig | None = None, theta=None) -> GradCheckReport:
    cfg = cfg or GradCheckConfig()
    theta = init_theta(cfg) if theta is None else np.asarray(theta, dtype=np.float64)
    g_tape = tape_gradient(theta, cfg)
    g_fd = fd_gradient(theta, cfg)
    err = relative_errors(g_tape, g_fd)
    rows = [{"index": i, "tape": float(a), "finite_difference": float(b), "relative_error": float(e)} for i, (a, b, e) in enumerate(zip(g_tape, g_fd, err))]
    worst = float(err.max())
    conf = {k: v for k, v in asdict(cfg).items() if k not in ("dynamics", "loss")}
    return GradCheckReport(worst, cfg.threshold(), worst < cfg.threshold(), rows, conf)
