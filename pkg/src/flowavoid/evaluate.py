"""Held-out evaluation: success rate, speed and velocity tracking."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .config import Config, EvalConfig, from_dict
from .dynamics import COLLIDED, REACHED
from .flow import FlowNoiseConfig
from .policy import PolicyParams, load_checkpoint
from .rollout import rollout
from .scene import generate_scene
from .train import rollout_config


@dataclass
class EvalMetrics:
    success_rate: float
    collision_rate: float
    mean_speed: float
    tracking_error: float
    episodes: list = field(default_factory=list)

    def as_dict(self, with_episodes: bool = False) -> dict:
        out = {
            "success_rate": self.success_rate,
            "collision_rate": self.collision_rate,
            "mean_speed": self.mean_speed,
            "tracking_error": self.tracking_error,
        }
        if with_episodes:
            out["episodes"] = self.episodes
        return out


def eval_episodes(cfg: Config, ec: EvalConfig | None = None):
    """Scenes, starts and goals of the held-out episodes.

    Each episode crosses the world along x at a random lateral offset; the
    scene generator keeps both endpoints clear.
    """
    ec = ec or cfg.eval
    rng = np.random.default_rng(ec.seed)
    scenes, starts, goals = [], [], []
    for i in range(ec.episodes):
        y = float(rng.uniform(-ec.lateral_range, ec.lateral_range))
        s = (ec.start_x, y, ec.altitude)
        g = (ec.goal_x, y, ec.altitude)
        gen = replace(cfg.scene, start=s, goal=g)
        scenes.append(generate_scene(ec.seed + i, gen))
        starts.append(s)
        goals.append(g)
    return scenes, np.array(starts, dtype=float), np.array(goals, dtype=float)


def evaluate_params(
    params: PolicyParams, cfg: Config, ec: EvalConfig | None = None, noise: FlowNoiseConfig | None = None, batch: int = 20
) -> EvalMetrics:
    """Roll the policy out on every held-out episode (no tape)."""
    ec = ec or cfg.eval
    ec.validate()
    scenes, starts, goals = eval_episodes(cfg, ec)
    rc = rollout_config(cfg)
    rc.goal_radius = ec.goal_radius
    rc.noise = noise
    dist = np.linalg.norm(goals - starts, axis=1)
    budget_s = ec.time_factor * dist.max() / ec.speed
    T = int(math.ceil(budget_s / cfg.dynamics.dt))
    episodes = []
    for lo in range(0, len(scenes), batch):
        hi = min(lo + batch, len(scenes))
        speeds = np.full(hi - lo, ec.speed)
        tr = rollout(params, scenes[lo:hi], starts[lo:hi], goals[lo:hi], speeds, T, rc, "eval", ec.seed + lo)
        for j in range(hi - lo):
            i = lo + j
            n = int(tr.end_step[j])
            limit = ec.time_factor * dist[i] / ec.speed
            vel = tr.velocities[1 : n + 1, j]
            vbar = tr.vbar[:n, j]
            err = np.linalg.norm(tr.v_ref[:n, j] - vbar, axis=-1)
            status = tr.status[j]
            success = status == REACHED and n * cfg.dynamics.dt <= limit + 1e-9
            episodes.append(
                {
                    "episode": i,
                    "scene_seed": scenes[i].seed,
                    "status": status,
                    "success": bool(success),
                    "steps": n,
                    "time_s": n * cfg.dynamics.dt,
                    "mean_speed": float(np.linalg.norm(vel, axis=-1).mean()) if n else 0.0,
                    "tracking_error": float(err.mean()) if n else 0.0,
                    "final_position": tr.positions[n, j].tolist(),
                    "trajectory": tr.positions[: n + 1, j].round(4).tolist(),
                }
            )
    k = len(episodes)
    return EvalMetrics(
        success_rate=sum(e["success"] for e in episodes) / k,
        collision_rate=sum(e["status"] == COLLIDED for e in episodes) / k,
        mean_speed=float(np.mean([e["mean_speed"] for e in episodes])),
        tracking_error=float(np.mean([e["tracking_error"] for e in episodes])),
        episodes=episodes,
    )


def evaluate(checkpoint, eval_config: EvalConfig | None = None, noise: FlowNoiseConfig | None = None, cfg: Config | None = None):
    """Evaluate a checkpoint; the run configuration comes from its header unless given."""
    params, meta, _ = load_checkpoint(checkpoint)
    if cfg is None:
        cfg = from_dict(meta["config"]) if "config" in meta else Config()
    return evaluate_params(params, cfg, eval_config, noise)


def write_trajectories(metrics: EvalMetrics, path) -> None:
    """One JSON record per episode (line-delimited)."""
    with open(Path(path), "w") as fh:
        for ep in metrics.episodes:
            fh.write(json.dumps(ep) + "\n")
