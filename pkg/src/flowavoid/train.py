"""Policy optimization by backpropagation through rendered closed-loop rollouts."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .config import Config, save_config, to_dict
from .errors import TrainingAborted
from .losses import total_loss
from .optim import OptimizerState, adam_step, clip_global_norm
from .policy import PolicyParams, init_params, load_checkpoint, save_checkpoint
from .rollout import RolloutConfig, SceneQuery, rollout
from .scene import generate_scene

log = logging.getLogger(__name__)


def rollout_config(cfg: Config, alpha: float | None = None) -> RolloutConfig:
    return RolloutConfig(
        dynamics=cfg.dynamics,
        intrinsics=cfg.camera,
        loss=cfg.loss,
        crop_fraction=cfg.observation.crop_fraction,
        flow_scale=cfg.observation.flow_scale,
        yaw_mode=cfg.observation.yaw_mode,
        alpha=cfg.train.alpha if alpha is None else alpha,
        goal_radius=cfg.eval.goal_radius,
    )


class EpisodeSampler:
    """Training episodes: a cached pool of scenes plus random start/goal pairs.

    Starts and goals are drawn inside the world, ``goal_distance_range``
    apart horizontally, and rejected until both clear every obstacle by
    ``spawn_clearance``.
    """

    def __init__(self, cfg: Config):
        self.cfg = cfg
        self._pool: dict[int, object] = {}
        self._gen = cfg.scene

    def scene_seed(self, idx: int) -> int:
        return int(np.random.SeedSequence([self.cfg.train.seed, idx, 7]).generate_state(1)[0])

    def scene(self, idx: int):
        if idx not in self._pool:
            self._pool[idx] = generate_scene(self.scene_seed(idx), self._gen)
        return self._pool[idx]

    def sample(self, rng: np.random.Generator, batch: int):
        tc = self.cfg.train
        (x0, y0, _), (x1, y1, _) = self._gen.bounds
        z = self.cfg.eval.altitude
        margin = 2.0
        scenes, starts, goals = [], [], []
        for _ in range(batch):
            scene = self.scene(int(rng.integers(tc.scene_pool)))
            q = SceneQuery([scene, scene])
            for _attempt in range(1000):
                s = np.array([rng.uniform(x0 + margin, x1 - margin), rng.uniform(y0 + margin, y1 - margin), z])
                dist = rng.uniform(*tc.goal_distance_range)
                ang = rng.uniform(-np.pi, np.pi)
                g = s + dist * np.array([np.cos(ang), np.sin(ang), 0.0])
                if not (x0 + margin <= g[0] <= x1 - margin and y0 + margin <= g[1] <= y1 - margin):
                    continue
                d, _, _ = q.numeric(np.stack([s, g]))
                if d.min() >= tc.spawn_clearance:
                    break
            else:
                # crowded scene: fall back to the generator's guaranteed-clear pair
                s, g = np.array(self._gen.start, dtype=float), np.array(self._gen.goal, dtype=float)
            scenes.append(scene)
            starts.append(s)
            goals.append(g)
        speeds = rng.uniform(*tc.speed_range, size=batch)
        frac = rng.uniform(*tc.init_speed_fraction, size=batch)
        starts, goals = np.array(starts), np.array(goals)
        heading = goals - starts
        heading[:, 2] = 0.0
        heading /= np.linalg.norm(heading, axis=1, keepdims=True)
        v0 = heading * (speeds * frac)[:, None]
        return scenes, starts, goals, speeds, v0


@dataclass
class IterationResult:
    loss: float
    breakdown: dict
    grads: np.ndarray
    mean_speed: float
    collision_rate: float
    speeds: np.ndarray = field(default_factory=lambda: np.zeros(0))


def iteration_gradient(params: PolicyParams, cfg: Config, sampler: EpisodeSampler, it: int, alpha=None) -> IterationResult:
    """Sample one batch, roll it out on a tape and backpropagate."""
    tc = cfg.train
    rng = np.random.default_rng([tc.seed, it])
    scenes, starts, goals, speeds, v0 = sampler.sample(rng, tc.batch)
    tape = ad.Tape(ad.WIDE if tc.precision == "wide" else ad.NARROW)
    flat = params.flat.astype(tape.dtype)
    nodes = params.on_tape(tape, flat)
    rc = rollout_config(cfg, alpha)
    trace = rollout(params, scenes, starts, goals, speeds, tc.horizon, rc, "train", it, v0, tape, nodes)
    loss, breakdown = total_loss(trace, cfg.loss)
    grads = params.flatten_grads(tape.backward(loss))
    speed = np.linalg.norm(trace.velocities[1:, :, :2], axis=-1)
    alive = trace.alive
    mean_speed = float((speed[: alive.shape[0]] * alive).sum() / max(alive.sum(), 1))
    collided = float(np.mean([s == "collided" for s in trace.status]))
    return IterationResult(float(loss.value), breakdown.as_dict(), grads, mean_speed, collided, speeds)


def train(cfg: Config, out_dir, resume=None, progress=None) -> Path:
    """Optimize a policy; returns the path of the final checkpoint.

    Writes ``config.json``, ``metrics.jsonl`` (one record per iteration) and
    ``ckpt_XXXXXX.flpc`` / ``final.flpc`` into ``out_dir``.

    Raises:
        TrainingAborted: ``max_nonfinite`` consecutive non-finite losses.
    """
    cfg.validate()
    tc = cfg.train
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.json")
    if resume is not None:
        params, meta, opt_arrays = load_checkpoint(resume)
        opt = OptimizerState.for_params(params.size, **meta.get("optimizer", {"lr": tc.lr}))
        opt.load_arrays(opt_arrays)
        opt.step = int(meta.get("optimizer_step", 0))
        opt.nonfinite = int(meta.get("nonfinite", 0))
        start_it = int(meta.get("iteration", 0))
    else:
        params = init_params(cfg.arch, tc.seed)
        opt = OptimizerState.for_params(params.size, lr=tc.lr)
        start_it = 0
    sampler = EpisodeSampler(cfg)
    metrics_path = out / "metrics.jsonl"
    t0 = time.monotonic()
    bad_streak = 0
    it = start_it
    with open(metrics_path, "a") as mlog:
        while it < tc.iterations:
            if tc.time_budget_s is not None and time.monotonic() - t0 >= tc.time_budget_s:
                break
            res = iteration_gradient(params, cfg, sampler, it)
            finite = np.isfinite(res.loss) and np.all(np.isfinite(res.grads))
            if not finite:
                bad_streak += 1
                opt.nonfinite += 1
                log.warning("iteration %d: non-finite loss or gradient, update skipped (%d in a row)", it, bad_streak)
            else:
                bad_streak = 0
                g = clip_global_norm(res.grads, tc.grad_clip)
                params.flat, opt = adam_step(params.flat, g.astype(np.float32), opt)
            it += 1
            record = {
                "iteration": it,
                "loss": res.loss,
                **{f"loss_{k}": v for k, v in res.breakdown.items() if k != "total"},
                "mean_speed": res.mean_speed,
                "collision_rate": res.collision_rate,
                "v_ref": [float(s) for s in res.speeds],
                "grad_norm": float(np.linalg.norm(res.grads)) if finite else None,
                "skipped": not finite,
                "wall_time": time.monotonic() - t0,
            }
            if it % tc.log_every == 0 or not finite:
                mlog.write(json.dumps(record) + "\n")
                mlog.flush()
            if progress is not None:
                progress(record)
            if bad_streak >= tc.max_nonfinite:
                raise TrainingAborted(
                    f"{bad_streak} consecutive non-finite iterations ending at {it - 1}; last breakdown {res.breakdown}"
                )
            if tc.checkpoint_every and it % tc.checkpoint_every == 0:
                _save(out / f"ckpt_{it:06d}.flpc", params, opt, cfg, it)
    final = out / "final.flpc"
    _save(final, params, opt, cfg, it)
    return final


def _save(path, params, opt, cfg, it):
    meta = {
        "iteration": it,
        "config": to_dict(cfg),
        "optimizer": {k: getattr(opt, k) for k in ("lr", "beta1", "beta2", "eps")},
        "optimizer_step": opt.step,
        "nonfinite": opt.nonfinite,
    }
    save_checkpoint(path, params, meta, opt.arrays())


def read_metrics(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
