"""Closed-loop episodes: render, observe, act, integrate, check, repeat.

A rollout runs a batch of environments in lockstep (one scene, start, goal
and speed per environment).  In training mode every loss-relevant quantity
is recorded on one shared tape; observations are computed from plain arrays
and therefore carry no gradient.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .dynamics import (
    COLLIDED,
    OUT_OF_BOUNDS,
    REACHED,
    RUNNING,
    DynamicsConfig,
    QuadState,
    decay_state,
    rotation_body_to_world,
    step,
    update_yaw,
)
from .errors import ContractViolation
from .flow import FlowImage, FlowNoiseConfig, observation_arrays, perturb_flow
from .losses import LossConfig, RolloutTrace
from .policy import PolicyParams, forward, initial_hidden
from .render import BatchRenderer, CameraIntrinsics
from .scene import Scene, pack_scenes, sdf_batch

FAR_CLEARANCE = 1e3
PROPRIO_VEL_SCALE = 10.0


@dataclass
class RolloutConfig:
    dynamics: DynamicsConfig = field(default_factory=DynamicsConfig)
    intrinsics: CameraIntrinsics = field(default_factory=CameraIntrinsics)
    loss: LossConfig = field(default_factory=LossConfig)
    crop_fraction: float = 0.5
    flow_scale: float = 20.0
    yaw_mode: str = "velocity_aligned"
    alpha: float = 10.0
    goal_radius: float = 2.0
    noise: FlowNoiseConfig | None = None
    keep_observations: bool = False


# ---------------------------------------------------------------------------
# differentiable geometry queries


class SceneQuery:
    """Signed distance to each environment's own scene, as tape operations."""

    def __init__(self, scenes):
        self.scenes = list(scenes)
        self.kinds, self.params, self.offsets, self.grounds = pack_scenes(self.scenes)

    def numeric(self, points: np.ndarray):
        d, G, H = sdf_batch(self.kinds, self.params, self.offsets, np.ascontiguousarray(points, dtype=np.float64))
        far = ~(d < FAR_CLEARANCE)
        d = np.where(far, FAR_CLEARANCE, d)
        G[far] = 0.0
        H[far] = 0.0
        return d, G, H

    def on_tape(self, p: ad.Node):
        """Returns ``(d, n)``: clearance and unit direction toward the nearest surface."""
        d, G, H = self.numeric(p.value)
        d_node = ad.linear_vjp(p, d, lambda g: g[:, None] * G)
        n_node = ad.linear_vjp(p, -G, lambda g: -np.einsum("bi,bij->bj", g, H))
        return d_node, n_node


def body_to_world_on_tape(cmd_body, M: np.ndarray):
    """``cmd_body[b] @ M[b]`` for a node or an array."""
    if isinstance(cmd_body, ad.Node):
        val = np.einsum("bi,bij->bj", cmd_body.value, M)
        return ad.linear_vjp(cmd_body, val, lambda g: np.einsum("bj,bij->bi", g, M))
    return np.einsum("bi,bij->bj", cmd_body, M)


def reference_velocity(p: np.ndarray, goal: np.ndarray, speed: np.ndarray) -> np.ndarray:
    """Horizontal velocity of magnitude ``speed`` pointing at the goal."""
    delta = goal - p
    delta[:, 2] = 0.0
    n = np.linalg.norm(delta, axis=1, keepdims=True)
    unit = np.divide(delta, n, out=np.zeros_like(delta), where=n > 1e-9)
    return unit * speed[:, None]


def _noise_seed(seed: int, env: int, k: int) -> int:
    return int(np.random.SeedSequence([seed, env, k]).generate_state(1)[0])


def _value(x):
    return x.value if isinstance(x, ad.Node) else x


# ---------------------------------------------------------------------------


def rollout(
    policy: PolicyParams,
    scenes,
    starts,
    goals,
    speeds,
    T: int,
    cfg: RolloutConfig | None = None,
    mode: str = "train",
    seed: int = 0,
    init_velocity=None,
    tape: ad.Tape | None = None,
    nodes: dict | None = None,
) -> RolloutTrace:
    """Run ``len(scenes)`` episodes for up to ``T`` steps.

    Args:
        policy: network parameters.
        scenes: one :class:`Scene` per environment.
        starts, goals: ``(B, 3)`` positions.
        speeds: ``(B,)`` reference speed magnitudes.
        T: step budget.
        mode: ``"train"`` records on ``tape`` (created if absent);
            ``"eval"`` runs on plain arrays and may perturb the flow.
        seed: seeds the flow perturbation.
        init_velocity: optional ``(B, 3)`` starting velocity.
        nodes: parameter leaves already on ``tape``.

    Returns:
        A :class:`RolloutTrace`.  Environments that terminate stay in the
        batch but are masked out of every later step.
    """
    cfg = cfg or RolloutConfig()
    if mode not in ("train", "eval"):
        raise ContractViolation(f"unknown rollout mode {mode!r}")
    if isinstance(scenes, Scene):
        scenes = [scenes]
    dyn = cfg.dynamics
    dyn.validate()
    starts = np.atleast_2d(np.asarray(starts, dtype=np.float64))
    goals = np.atleast_2d(np.asarray(goals, dtype=np.float64))
    B = starts.shape[0]
    speeds = np.broadcast_to(np.asarray(speeds, dtype=np.float64), (B,)).copy()
    if len(scenes) != B or goals.shape != (B, 3):
        raise ContractViolation("scenes, starts, goals and speeds must agree on batch size")
    arch = policy.arch
    if arch.a_max > dyn.a_max + 1e-12:
        raise ContractViolation("policy a_max exceeds the vehicle limit")

    recording = mode == "train"
    if recording:
        tape = ad.Tape() if tape is None else tape
        nodes = nodes if nodes is not None else policy.on_tape(tape)
    else:
        tape = None
    query = SceneQuery(scenes)
    renderer = BatchRenderer(scenes, cfg.intrinsics)
    env_index = np.arange(B, dtype=np.int64)

    yaw0 = np.arctan2(goals[:, 1] - starts[:, 1], goals[:, 0] - starts[:, 0])
    state = QuadState.at_rest(starts, yaw0, init_velocity, dyn)
    h = initial_hidden(arch, B)
    if recording:
        h = tape.const(h)
    decay = float(np.exp(-cfg.alpha * dyn.dt))
    last_cmd = np.zeros((B, 3))
    prev_depth = np.zeros((B, cfg.intrinsics.height, cfg.intrinsics.width))
    prev_pose = np.zeros((B, 4))
    have_prev = np.zeros(B, dtype=bool)

    status = np.array([RUNNING] * B, dtype=object)
    end_step = np.zeros(B, dtype=np.int64)
    alive_rows, vbar_rows, ref_rows, cmd_rows, d_rows, vc_rows = [], [], [], [], [], []
    positions = [starts.copy()]
    velocities = [np.asarray(_value(state.v), dtype=float).copy()]
    yaws = [yaw0.copy()]
    accels = [np.zeros((B, 3))]
    commands = [np.zeros((B, 3))]
    observations = []

    for k in range(T):
        alive = status == RUNNING
        if not alive.any():
            break
        p_now = np.asarray(_value(state.p), dtype=np.float64)
        yaw = np.asarray(state.yaw, dtype=np.float64)
        pose = np.concatenate([p_now, yaw[:, None]], axis=1)
        depth, flow, bad = renderer.render(env_index, pose, prev_pose, prev_depth, have_prev)
        if mode == "eval" and cfg.noise is not None and not cfg.noise.is_zero():
            for b in range(B):
                flow[b] = perturb_flow(FlowImage(flow[b]), cfg.noise, _noise_seed(seed, b, k)).values
        full, central = observation_arrays(flow, cfg.crop_fraction, cfg.flow_scale)
        M = rotation_body_to_world(yaw)
        v_ref = reference_velocity(p_now, goals, speeds)
        vbar_now = np.asarray(_value(state.vbar), dtype=np.float64)
        proprio = np.concatenate(
            [
                np.einsum("bj,bij->bi", v_ref, M) / PROPRIO_VEL_SCALE,
                np.einsum("bj,bij->bi", vbar_now, M) / PROPRIO_VEL_SCALE,
                last_cmd / arch.a_max,
            ],
            axis=1,
        )
        parts = [full.reshape(B, -1)] + ([central.reshape(B, -1)] if arch.central else []) + [proprio]
        obs = np.concatenate(parts, axis=1)
        if cfg.keep_observations:
            observations.append(obs.copy())

        cmd_body, h = forward(policy, obs, h, tape, nodes)
        cmd_world = body_to_world_on_tape(cmd_body, M)
        if recording:
            state = decay_state(state, tape, decay)
        state = step(state, cmd_world, dyn)

        p_new = np.asarray(_value(state.p), dtype=np.float64)
        if recording:
            d_node, n_node = query.on_tape(state.p)
            vc = ad.relu(ad.sum(state.v * n_node, axis=-1))
            d_num = d_node.value.astype(np.float64)
        else:
            d_num, G, _ = query.numeric(p_new)
            vc = np.maximum(np.einsum("bi,bi->b", np.asarray(state.v, dtype=float), -G), 0.0)
            d_node = d_num
        alive_rows.append(alive)
        vbar_rows.append(state.vbar)
        ref_rows.append(v_ref)
        cmd_rows.append(cmd_body)
        d_rows.append(d_node)
        vc_rows.append(vc)

        state.yaw = update_yaw(state, cfg.yaw_mode, goals - p_new, dyn)
        last_cmd = np.asarray(_value(cmd_body), dtype=np.float64)
        prev_depth, prev_pose, have_prev = depth, pose, np.ones(B, dtype=bool)
        positions.append(p_new.copy())
        velocities.append(np.asarray(_value(state.v), dtype=float).copy())
        yaws.append(np.asarray(state.yaw, dtype=float).copy())
        accels.append(np.asarray(_value(state.a), dtype=float).copy())
        commands.append(np.asarray(_value(cmd_world), dtype=float).copy())

        # termination
        for b in np.flatnonzero(alive):
            end_step[b] = k + 1
            ground = query.grounds[b]
            if bad[b] or d_num[b] < dyn.r_q or (np.isfinite(ground) and p_new[b, 2] - ground < dyn.r_q):
                status[b] = COLLIDED
            elif np.linalg.norm(p_new[b] - goals[b]) < cfg.goal_radius:
                status[b] = REACHED
            elif not scenes[b].contains(p_new[b], dyn.bounds_margin):
                status[b] = OUT_OF_BOUNDS

    trace = RolloutTrace(tape, dt=dyn.dt)
    if alive_rows:
        trace.alive = np.stack(alive_rows)
        trace.v_ref = np.stack(ref_rows)
        if recording:
            trace.vbar = ad.stack(vbar_rows)
            trace.cmd = ad.stack(cmd_rows)
            trace.d = ad.stack(d_rows)
            trace.vc = ad.stack(vc_rows)
        else:
            trace.vbar = np.stack(vbar_rows)
            trace.cmd = np.stack(cmd_rows)
            trace.d = np.stack(d_rows)
            trace.vc = np.stack(vc_rows)
    else:
        trace.alive = np.zeros((0, B), dtype=bool)
    trace.positions = np.stack(positions)
    trace.velocities = np.stack(velocities)
    trace.yaws = np.stack(yaws)
    trace.accels = np.stack(accels)
    trace.commands = np.stack(commands)
    trace.status = list(status)
    trace.end_step = end_step
    trace.observations = observations
    return trace
