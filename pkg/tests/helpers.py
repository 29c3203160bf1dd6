"""Shared oracles for the test suite."""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from flowavoid.flow import analytic_flow, reprojection_flow, twist_from_motion
from flowavoid.render import CameraIntrinsics, Pose, ray_depth
from flowavoid.scene import closest_distance, generate_scene


def discontinuity_mask(z: np.ndarray, radius: int = 3, rel: float = 0.05) -> np.ndarray:
    """Pixels within ``radius`` of a relative depth jump larger than ``rel``."""
    jump = np.zeros(z.shape, dtype=bool)
    gy = np.abs(np.diff(z, axis=0)) > rel * np.minimum(z[1:], z[:-1])
    gx = np.abs(np.diff(z, axis=1)) > rel * np.minimum(z[:, 1:], z[:, :-1])
    jump[1:] |= gy
    jump[:-1] |= gy
    jump[:, 1:] |= gx
    jump[:, :-1] |= gx
    pad = np.pad(jump, radius)
    k = 2 * radius + 1
    return sliding_window_view(pad, (k, k)).any(axis=(-1, -2))


def flow_oracle_fraction(rng: np.random.Generator, intr=None, dt: float = 1e-3, tol: float = 0.01) -> float:
    """Share of valid pixels where reprojection flow / dt agrees with the motion field.

    Draws a random scene, a collision-free pose and a random twist.
    """
    intr = intr or CameraIntrinsics()
    scene = generate_scene(int(rng.integers(2**31)))
    while True:
        p = rng.uniform([-18, -18, 0.8], [18, 18, 3.0])
        if closest_distance(scene, p)[0] > 0.5:
            break
    yaw = rng.uniform(-np.pi, np.pi)
    v = rng.normal(size=3) * 2.0
    r = rng.normal()
    d0 = ray_depth(scene, Pose(p, yaw), intr)
    rep = reprojection_flow(d0, Pose(p, yaw), Pose(p + v * dt, yaw + r * dt), intr).values / dt
    # the constant body twist that carries the first pose to the second sees the
    # world velocity in the frame halfway through the turn
    ana = analytic_flow(d0, twist_from_motion(v, yaw + 0.5 * r * dt, r), intr).values
    err = np.linalg.norm(rep - ana, axis=-1) / np.maximum(np.linalg.norm(ana, axis=-1), 1e-12)
    keep = ~discontinuity_mask(d0.values)
    return float((err[keep] < tol).mean())
