"""Renderer throughput measurement (depth plus flow per frame)."""

from __future__ import annotations

import os
import time
from dataclasses import dataclass, replace

import numba
import numpy as np

from .render import BatchRenderer, CameraIntrinsics
from .scene import GenConfig, Scene, closest_distance, generate_scene


@dataclass
class BenchmarkResult:
    fps: float
    frames: int
    repeats: int
    threads: int
    resolution: tuple
    primitives: int
    seconds: list

    def as_dict(self) -> dict:
        return {
            "fps": self.fps,
            "frames": self.frames,
            "repeats": self.repeats,
            "threads": self.threads,
            "resolution": list(self.resolution),
            "primitives": self.primitives,
            "seconds": self.seconds,
            "cpu_count": os.cpu_count(),
        }


def benchmark_scene(primitives: int = 100, seed: int = 4) -> Scene:
    """A world with exactly ``primitives`` obstacles."""
    cfg = GenConfig(density=0.1)
    for s in range(seed, seed + 100):
        sc = generate_scene(s, cfg)
        if len(sc.primitives) >= primitives:
            return Scene(sc.primitives[:primitives], cfg.bounds, cfg.ground_plane_z, s)
    raise RuntimeError("could not generate a dense enough scene")


def benchmark_poses(scene: Scene, n: int, seed: int = 0, step: float = 0.2):
    rng = np.random.default_rng(seed)
    (x0, y0, _), (x1, y1, _) = scene.bounds
    poses = []
    while len(poses) < n:
        p = rng.uniform([x0, y0, 0.5], [x1, y1, 4.5])
        if closest_distance(scene, p)[0] > 0.5:
            poses.append([*p, rng.uniform(-np.pi, np.pi)])
    poses = np.array(poses)
    prev = poses.copy()
    prev[:, 0] -= step * np.cos(poses[:, 3])
    prev[:, 1] -= step * np.sin(poses[:, 3])
    prev[:, 3] -= 0.05
    return poses, prev


def run_benchmark(
    resolution=(48, 64), threads: int | None = None, primitives: int = 100, frames: int = 2048, repeats: int = 5
) -> BenchmarkResult:
    """Median-of-``repeats`` throughput of rendering depth and reprojection flow.

    ``threads`` is capped at the number of worker threads numba can start.
    """
    h, w = resolution
    intr = replace(CameraIntrinsics(), width=int(w), height=int(h))
    limit = numba.config.NUMBA_NUM_THREADS
    threads = limit if threads is None else max(1, min(int(threads), limit))
    numba.set_num_threads(threads)
    scene = benchmark_scene(primitives)
    poses, prev = benchmark_poses(scene, frames)
    r = BatchRenderer([scene], intr)
    idx = np.zeros(frames, dtype=np.int64)
    prev_depth, _, _ = r.render(idx, prev)
    have = np.ones(frames, dtype=bool)
    r.render(idx, poses, prev, prev_depth, have)  # warm-up
    secs = []
    for _ in range(repeats):
        t = time.perf_counter()
        r.render(idx, poses, prev, prev_depth, have)
        secs.append(time.perf_counter() - t)
    fps = frames / float(np.median(secs))
    return BenchmarkResult(fps, frames, repeats, threads, (h, w), primitives, secs)
