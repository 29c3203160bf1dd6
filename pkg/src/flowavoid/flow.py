"""Optical flow: depth reprojection, the analytic motion-field model, and the
dual-resolution policy observation."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractViolation
from .render import CameraIntrinsics, DepthImage, Pose, _reproject_into, world_to_camera

OBS_HW = (12, 16)
FLO_MAGIC = 202021.25


@dataclass
class FlowImage:
    """Per-pixel displacement ``(du, dv)`` in pixels, shape ``(H, W, 2)``."""

    values: np.ndarray
    intrinsics: CameraIntrinsics | None = None

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 3 or v.shape[2] != 2:
            raise ContractViolation(f"flow must be (H, W, 2), got {v.shape}")
        if self.intrinsics is not None and v.shape[:2] != (self.intrinsics.height, self.intrinsics.width):
            raise ContractViolation("flow dimensions do not match intrinsics")
        self.values = v

    @property
    def shape(self):
        return self.values.shape[:2]


@dataclass(frozen=True)
class BodyTwist:
    """Camera-frame linear (m/s) and angular (rad/s) velocity.

    Yaw about world up is rotation about camera ``-y``, so a yaw rate ``r``
    appears as ``omega_body = (0, -r, 0)``.
    """

    v_body: tuple[float, float, float]
    omega_body: tuple[float, float, float] = (0.0, 0.0, 0.0)


def twist_from_motion(v_world, yaw: float, yaw_rate: float = 0.0) -> BodyTwist:
    v = world_to_camera(np.asarray(v_world, dtype=float), yaw)
    return BodyTwist(tuple(v), (0.0, -float(yaw_rate), 0.0))


@dataclass
class DualFlowObservation:
    full_flow: np.ndarray  # (12, 16, 2)
    central_flow: np.ndarray  # (12, 16, 2)
    proprio: np.ndarray  # (9,)

    def flatten(self) -> np.ndarray:
        return np.concatenate([self.full_flow.ravel(), self.central_flow.ravel(), self.proprio])


@dataclass
class FlowNoiseConfig:
    gaussian_sigma: float = 0.0
    dropout_prob: float = 0.0
    outlier_prob: float = 0.0
    outlier_scale: float = 0.0
    block: int = 4

    def validate(self):
        for name in ("dropout_prob", "outlier_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ContractViolation(f"{name} must lie in [0, 1]")
        if self.gaussian_sigma < 0 or self.outlier_scale < 0:
            raise ContractViolation("noise magnitudes must be >= 0")
        if self.block < 1:
            raise ContractViolation("block must be >= 1")

    def is_zero(self) -> bool:
        return self.gaussian_sigma == 0 and self.dropout_prob == 0 and self.outlier_prob == 0


# ---------------------------------------------------------------------------


def reprojection_flow(depth_prev: DepthImage, pose_prev: Pose, pose_curr: Pose, intr: CameraIntrinsics) -> FlowImage:
    """Flow from the previous depth frame reprojected into the current camera.

    Each previous pixel is lifted to 3D with its depth and projected into the
    current camera; points behind it or off-image are clamped to the border.
    The resulting per-pixel displacement is resampled onto the current grid
    by nearest-neighbour gather.
    """
    if depth_prev.intrinsics != intr:
        raise ContractViolation("depth image was rendered with different intrinsics")
    d = np.ascontiguousarray(depth_prev.values, dtype=np.float64)
    if d.shape != (intr.height, intr.width):
        raise ContractViolation("depth shape does not match intrinsics")
    flow = np.empty(d.shape + (2,))
    raw = np.empty(d.shape + (2,))
    _reproject_into(
        flow, raw, d, np.asarray(pose_prev.position, dtype=float), pose_prev.yaw,
        np.asarray(pose_curr.position, dtype=float), pose_curr.yaw, intr.focal, intr.cx, intr.cy,
    )
    return FlowImage(flow, intr)


def analytic_flow(depth: DepthImage, twist: BodyTwist, intr: CameraIntrinsics) -> FlowImage:
    """Instantaneous flow rate in px/s from the pinhole motion-field equation.

    With normalized coordinates ``(x, y)`` and depth ``Z``::

        [xdot]   1 [-1  0  x]       [ x*y    -(1+x^2)   y]
        [ydot] = - [ 0 -1  y] v  +  [1+y^2    -x*y     -x] w
                 Z

    scaled by the focal length.
    """
    z = np.asarray(depth.values, dtype=np.float64)
    if np.any(~(z > 0)):
        raise ContractViolation("depth must be strictly positive")
    x, y = intr.pixel_grid()
    vx, vy, vz = twist.v_body
    wx, wy, wz = twist.omega_body
    du = (-vx + x * vz) / z + x * y * wx - (1 + x * x) * wy + y * wz
    dv = (-vy + y * vz) / z + (1 + y * y) * wx - x * y * wy - x * wz
    return FlowImage(intr.focal * np.stack([du, dv], axis=-1), intr)


def _block_mean(a: np.ndarray, h: int, w: int) -> np.ndarray:
    """Area average over the two axes before the last of ``a`` (..., H, W, C)."""
    H, W = a.shape[-3], a.shape[-2]
    if H % h or W % w:
        raise ContractViolation(f"cannot downsample {H}x{W} to {h}x{w}: not integer multiples")
    bh, bw = H // h, W // w
    r = a.reshape(a.shape[:-3] + (h, bh, w, bw, a.shape[-1]))
    # explicit slice sums are much faster than a strided multi-axis mean
    rows = r[..., 0, :, :, :]
    for k in range(1, bh):
        rows = rows + r[..., k, :, :, :]
    out = rows[..., 0, :]
    for k in range(1, bw):
        out = out + rows[..., k, :]
    return out / (bh * bw)


def downsample_flow(flow: FlowImage, target: tuple[int, int]) -> FlowImage:
    h, w = target
    return FlowImage(_block_mean(flow.values, h, w))


def crop_window(height: int, width: int, crop_fraction: float, grid=OBS_HW):
    """Row/column slices of the central crop, sized to multiples of ``grid``."""
    if not 0 < crop_fraction <= 1:
        raise ContractViolation("crop_fraction must lie in (0, 1]")
    gh, gw = grid
    ch = min(max(1, round(crop_fraction * height / gh)) * gh, height)
    cw = min(max(1, round(crop_fraction * width / gw)) * gw, width)
    if ch % gh or cw % gw:
        raise ContractViolation(f"crop {ch}x{cw} is not divisible by {gh}x{gw}")
    r0 = (height - ch) // 2
    c0 = (width - cw) // 2
    return slice(r0, r0 + ch), slice(c0, c0 + cw)


def observation_arrays(flows: np.ndarray, crop_fraction: float, scale: float = 20.0):
    """Batched full and central 12x16 flow grids from ``(..., H, W, 2)`` flows."""
    H, W = flows.shape[-3], flows.shape[-2]
    rows, cols = crop_window(H, W, crop_fraction)
    full = _block_mean(flows, *OBS_HW) / scale
    central = _block_mean(flows[..., rows, cols, :], *OBS_HW) / scale
    return full, central


def build_observation(flow_highres: FlowImage, crop_fraction: float, proprio, scale: float = 20.0) -> DualFlowObservation:
    """Dual-resolution observation: downscaled full view plus downscaled centre crop.

    Both flow grids are divided by ``scale`` (pixels) before use.
    """
    full, central = observation_arrays(flow_highres.values, crop_fraction, scale)
    return DualFlowObservation(full, central, np.asarray(proprio, dtype=np.float64))


def perturb_flow(flow: FlowImage, cfg: FlowNoiseConfig, seed: int) -> FlowImage:
    """Corrupt a flow field to mimic estimator error (deterministic per seed)."""
    cfg.validate()
    out = np.array(flow.values, dtype=np.float64, copy=True)
    if cfg.is_zero():
        return FlowImage(out, flow.intrinsics)
    rng = np.random.default_rng(seed)
    H, W = out.shape[:2]
    if cfg.gaussian_sigma > 0:
        out += rng.normal(0.0, cfg.gaussian_sigma, size=out.shape)
    if cfg.dropout_prob > 0:
        b = cfg.block
        keep = rng.random((-(-H // b), -(-W // b))) >= cfg.dropout_prob
        mask = np.repeat(np.repeat(keep, b, axis=0), b, axis=1)[:H, :W]
        out *= mask[..., None]
    if cfg.outlier_prob > 0:
        hit = rng.random((H, W)) < cfg.outlier_prob
        ang = rng.uniform(0, 2 * np.pi, size=(H, W))
        gross = cfg.outlier_scale * np.stack([np.cos(ang), np.sin(ang)], axis=-1)
        out = np.where(hit[..., None], gross, out)
    return FlowImage(out, flow.intrinsics)


# ---------------------------------------------------------------------------
# Middlebury .flo


def write_flo(flow, path) -> None:
    values = flow.values if isinstance(flow, FlowImage) else np.asarray(flow)
    h, w = values.shape[:2]
    with open(path, "wb") as fh:
        fh.write(struct.pack("<fii", FLO_MAGIC, w, h))
        fh.write(np.ascontiguousarray(values, dtype="<f4").tobytes())


def read_flo(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 12:
        raise ContractViolation("flow file truncated")
    magic, w, h = struct.unpack("<fii", data[:12])
    if magic != FLO_MAGIC:
        raise ContractViolation("bad .flo magic")
    if w < 0 or h < 0 or len(data) != 12 + 8 * w * h:
        raise ContractViolation("flow file has wrong size")
    return np.frombuffer(data[12:], dtype="<f4").reshape(h, w, 2).copy()
