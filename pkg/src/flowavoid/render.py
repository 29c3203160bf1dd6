"""Ray-traced depth and reprojection flow on the CPU.

Camera convention: z forward along the yaw heading, x to the right, y down;
pitch and roll are always zero, so the camera y axis is world ``-z``.  Pixel
``(row j, col i)`` has its centre at ``(i + 0.5, j + 0.5)`` and the principal
point sits at ``(W/2, H/2)``.

Each primitive is first bounded in screen space (tangent-angle bounds for
circles, corner bounds for boxes) and only the pixels inside that window are
ray-tested, so cost scales with covered area rather than with
``pixels * primitives``.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numba
import numpy as np

from .errors import ContractViolation, DegeneratePoseError
from .scene import BOX, CYLINDER, SPHERE, Scene, pack_scenes

MISS = -1
GROUND = -2
_EPS_Z = 1e-6


@dataclass(frozen=True)
class CameraIntrinsics:
    width: int = 64
    height: int = 48
    horizontal_fov: float = 90.0
    depth_far: float = 30.0

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ContractViolation("image dimensions must be >= 1")
        if not 0 < self.horizontal_fov < 180:
            raise ContractViolation("horizontal_fov must be in (0, 180) degrees")
        if not self.depth_far > 0:
            raise ContractViolation("depth_far must be positive")

    @property
    def focal(self) -> float:
        return 0.5 * self.width / math.tan(math.radians(self.horizontal_fov) / 2)

    @property
    def cx(self) -> float:
        return 0.5 * self.width

    @property
    def cy(self) -> float:
        return 0.5 * self.height

    def pixel_grid(self):
        """Normalized image coordinates of every pixel centre, each ``(H, W)``."""
        u = (np.arange(self.width) + 0.5 - self.cx) / self.focal
        v = (np.arange(self.height) + 0.5 - self.cy) / self.focal
        return np.meshgrid(u, v)


@dataclass(frozen=True)
class Pose:
    position: tuple[float, float, float]
    yaw: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "position", tuple(float(v) for v in self.position))
        object.__setattr__(self, "yaw", float(self.yaw))

    def as_array(self) -> np.ndarray:
        return np.array([*self.position, self.yaw])


def camera_axes(yaw: float):
    """World-frame ``(right, down, forward)`` unit vectors of the camera."""
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([s, -c, 0.0]), np.array([0.0, 0.0, -1.0]), np.array([c, s, 0.0])


def world_to_camera(vec, yaw: float) -> np.ndarray:
    """Rotate world vectors (``(..., 3)``) into the camera frame."""
    r, d, f = camera_axes(yaw)
    vec = np.asarray(vec, dtype=float)
    return np.stack([vec @ r, vec @ d, vec @ f], axis=-1)


def camera_to_world(vec, yaw: float) -> np.ndarray:
    r, d, f = camera_axes(yaw)
    vec = np.asarray(vec, dtype=float)
    return vec[..., 0:1] * r + vec[..., 1:2] * d + vec[..., 2:3] * f


@dataclass
class DepthImage:
    values: np.ndarray
    intrinsics: CameraIntrinsics
    pose: Pose
    hit_ids: np.ndarray | None = None


# ---------------------------------------------------------------------------
# kernels


@numba.njit(cache=True)
def _pix_range(lo, hi, f, c, n):
    """Inclusive pixel index window whose centres may fall in normalized [lo, hi]."""
    if lo > hi:
        return 1, 0
    if lo == -np.inf:
        i0 = 0
    else:
        i0 = int(math.floor(c + f * lo - 0.5)) - 1
    if hi == np.inf:
        i1 = n - 1
    else:
        i1 = int(math.ceil(c + f * hi - 0.5)) + 1
    return max(i0, 0), min(i1, n - 1)


@numba.njit(cache=True)
def _circle_tan_range(a, z, r):
    """Range of ``a'/z'`` over a circle of radius r centred at (a, z), seen from 0."""
    if z > r:
        # tangent slopes solve u^2 (z^2 - r^2) - 2 a z u + a^2 - r^2 = 0
        den = z * z - r * r
        sq = r * math.sqrt(a * a + den)
        return (a * z - sq) / den, (a * z + sq) / den
    if z <= -r:
        return 1.0, 0.0
    dist = math.sqrt(a * a + z * z)
    if dist <= r * (1.0 + 1e-9):
        return -np.inf, np.inf
    theta = math.atan2(a, z)
    delta = math.asin(r / dist)
    lo = theta - delta
    hi = theta + delta
    half = 0.5 * math.pi
    if hi <= -half or lo >= half:
        return 1.0, 0.0
    tlo = -np.inf if lo <= -half else math.tan(lo)
    thi = np.inf if hi >= half else math.tan(hi)
    return tlo, thi


@numba.njit(cache=True)
def _vertical_tan_range(ya, yb, zmin, zmax):
    if zmax <= _EPS_Z:
        return 1.0, 0.0
    if zmin <= _EPS_Z:
        return -np.inf, np.inf
    lo = min(ya / zmin, ya / zmax)
    hi = max(yb / zmin, yb / zmax)
    return lo, hi


@numba.njit(cache=True)
def _inside(kind, prm, p):
    ex = p[0] - prm[0]
    ey = p[1] - prm[1]
    ez = p[2] - prm[2]
    if kind == SPHERE:
        return ex * ex + ey * ey + ez * ez < prm[3] * prm[3]
    if kind == BOX:
        return abs(ex) < prm[3] and abs(ey) < prm[4] and abs(ez) < prm[5]
    return ex * ex + ey * ey < prm[3] * prm[3] and abs(ez) < 0.5 * prm[4]


@numba.njit(cache=True)
def _intersect(kind, prm, ox, oy, oz, dx, dy, dz):
    """Smallest positive ray parameter of the hit, or inf."""
    if kind == SPHERE:
        px = ox - prm[0]
        py = oy - prm[1]
        pz = oz - prm[2]
        a = dx * dx + dy * dy + dz * dz
        b = px * dx + py * dy + pz * dz
        c = px * px + py * py + pz * pz - prm[3] * prm[3]
        disc = b * b - a * c
        if disc < 0.0:
            return np.inf
        sq = math.sqrt(disc)
        t = (-b - sq) / a
        if t > 0.0:
            return t
        t = (-b + sq) / a
        return t if t > 0.0 else np.inf
    if kind == BOX:
        tmin = -np.inf
        tmax = np.inf
        o = (ox, oy, oz)
        d = (dx, dy, dz)
        for k in range(3):
            lo = prm[k] - prm[3 + k]
            hi = prm[k] + prm[3 + k]
            if d[k] == 0.0:
                if o[k] < lo or o[k] > hi:
                    return np.inf
            else:
                t1 = (lo - o[k]) / d[k]
                t2 = (hi - o[k]) / d[k]
                if t1 > t2:
                    t1, t2 = t2, t1
                if t1 > tmin:
                    tmin = t1
                if t2 < tmax:
                    tmax = t2
        if tmax < tmin or tmax <= 0.0:
            return np.inf
        return tmin if tmin > 0.0 else tmax
    # vertical cylinder
    r = prm[3]
    zlo = prm[2] - 0.5 * prm[4]
    zhi = prm[2] + 0.5 * prm[4]
    px = ox - prm[0]
    py = oy - prm[1]
    best = np.inf
    a = dx * dx + dy * dy
    if a > 0.0:
        b = px * dx + py * dy
        c = px * px + py * py - r * r
        disc = b * b - a * c
        if disc >= 0.0:
            sq = math.sqrt(disc)
            for t in ((-b - sq) / a, (-b + sq) / a):
                if t > 0.0 and t < best:
                    z = oz + t * dz
                    if zlo <= z <= zhi:
                        best = t
    if dz != 0.0:
        for zc in (zlo, zhi):
            t = (zc - oz) / dz
            if t > 0.0 and t < best:
                x = px + t * dx
                y = py + t * dy
                if x * x + y * y <= r * r:
                    best = t
    return best


@numba.njit(cache=True)
def _column_interval(kind, prm, px, py, dx, dy):
    """Ray-parameter interval inside the primitive's horizontal footprint."""
    if kind == CYLINDER:
        a = dx * dx + dy * dy
        b = px * dx + py * dy
        c = px * px + py * py - prm[3] * prm[3]
        disc = b * b - a * c
        if disc < 0.0:
            return np.inf, -np.inf
        sq = math.sqrt(disc)
        return (-b - sq) / a, (-b + sq) / a
    tmin = -np.inf
    tmax = np.inf
    o = (px + prm[0], py + prm[1])
    d = (dx, dy)
    for k in range(2):
        lo = prm[k] - prm[3 + k]
        hi = prm[k] + prm[3 + k]
        if d[k] == 0.0:
            if o[k] < lo or o[k] > hi:
                return np.inf, -np.inf
        else:
            t1 = (lo - o[k]) / d[k]
            t2 = (hi - o[k]) / d[k]
            if t1 > t2:
                t1, t2 = t2, t1
            if t1 > tmin:
                tmin = t1
            if t2 < tmax:
                tmax = t2
    return tmin, tmax


@numba.njit(cache=True)
def _render_into(depth, ids, kinds, params, lo, hi, ground, pos, yaw, f, cx, cy, far):
    """Fill ``depth``/``ids`` for one camera; returns True on a degenerate pose.

    Boxes and vertical cylinders are extruded shapes, so with zero pitch a
    ray's horizontal interval depends only on its column and its vertical
    interval only on its row; the hit is their intersection.
    """
    H, W = depth.shape
    c = math.cos(yaw)
    s = math.sin(yaw)
    rx, ry = s, -c
    fx, fy = c, s
    ox, oy, oz = pos[0], pos[1], pos[2]
    for k in range(lo, hi):
        if _inside(kinds[k], params[k], pos):
            return True
    depth[:, :] = far
    ids[:, :] = -1
    # ground plane: rows below the horizon only
    if not math.isnan(ground):
        h = oz - ground
        if h <= 0.0:
            return True
        for j in range(H):
            dyn = (j + 0.5 - cy) / f
            if dyn > 0.0:
                t = h / dyn
                if t < far:
                    for i in range(W):
                        depth[j, i] = t
                        ids[j, i] = -2
    tc1 = np.empty(W)
    tc2 = np.empty(W)
    for k in range(lo, hi):
        kind = kinds[k]
        prm = params[k]
        ex = prm[0] - ox
        ey = prm[1] - oy
        xc = ex * rx + ey * ry
        zc = ex * fx + ey * fy
        yc = -(prm[2] - oz)
        if kind == SPHERE:
            r = prm[3]
            if zc - r > far:
                continue
            ulo, uhi = _circle_tan_range(xc, zc, r)
            vlo, vhi = _circle_tan_range(yc, zc, r)
        elif kind == CYLINDER:
            r = prm[3]
            if zc - r > far:
                continue
            ulo, uhi = _circle_tan_range(xc, zc, r)
            hh = 0.5 * prm[4]
            vlo, vhi = _vertical_tan_range(yc - hh, yc + hh, zc - r, zc + r)
        else:
            zmin = np.inf
            zmax = -np.inf
            ulo = np.inf
            uhi = -np.inf
            for sx in (-1.0, 1.0):
                for sy in (-1.0, 1.0):
                    qx = ex + sx * prm[3]
                    qy = ey + sy * prm[4]
                    x = qx * rx + qy * ry
                    z = qx * fx + qy * fy
                    zmin = min(zmin, z)
                    zmax = max(zmax, z)
                    if z > _EPS_Z:
                        ulo = min(ulo, x / z)
                        uhi = max(uhi, x / z)
            if zmax <= _EPS_Z or zmin > far:
                continue
            if zmin <= _EPS_Z:
                ulo, uhi = -np.inf, np.inf
            hz = prm[5]
            vlo, vhi = _vertical_tan_range(yc - hz, yc + hz, zmin, zmax)
        i0, i1 = _pix_range(ulo, uhi, f, cx, W)
        j0, j1 = _pix_range(vlo, vhi, f, cy, H)
        if i0 > i1 or j0 > j1:
            continue
        if kind == SPHERE:
            for j in range(j0, j1 + 1):
                dz = -((j + 0.5 - cy) / f)
                for i in range(i0, i1 + 1):
                    dxn = (i + 0.5 - cx) / f
                    t = _intersect(kind, prm, ox, oy, oz, dxn * rx + fx, dxn * ry + fy, dz)
                    if t < depth[j, i]:
                        depth[j, i] = t
                        ids[j, i] = k - lo
            continue
        if kind == CYLINDER:
            zlo = prm[2] - 0.5 * prm[4]
            zhi = prm[2] + 0.5 * prm[4]
        else:
            zlo = prm[2] - prm[5]
            zhi = prm[2] + prm[5]
        for i in range(i0, i1 + 1):
            dxn = (i + 0.5 - cx) / f
            a, b = _column_interval(kind, prm, ox - prm[0], oy - prm[1], dxn * rx + fx, dxn * ry + fy)
            tc1[i] = a
            tc2[i] = b
        for j in range(j0, j1 + 1):
            dz = -((j + 0.5 - cy) / f)
            if dz == 0.0:
                if oz < zlo or oz > zhi:
                    continue
                tz1 = -np.inf
                tz2 = np.inf
            else:
                tz1 = (zlo - oz) / dz
                tz2 = (zhi - oz) / dz
                if tz1 > tz2:
                    tz1, tz2 = tz2, tz1
            for i in range(i0, i1 + 1):
                t1 = max(tc1[i], tz1)
                t2 = min(tc2[i], tz2)
                if t2 < t1 or t2 <= 0.0:
                    continue
                t = t1 if t1 > 0.0 else t2
                if t < depth[j, i]:
                    depth[j, i] = t
                    ids[j, i] = k - lo
    return False


@numba.njit(cache=True, fastmath=True)
def _reproject_into(flow, raw, depth, pos0, yaw0, pos1, yaw1, f, cx, cy):
    """Backward-anchored reprojection flow, then nearest-neighbour gather."""
    H, W = depth.shape
    c1 = math.cos(yaw1)
    s1 = math.sin(yaw1)
    # camera-1 coords of a camera-0 point z*(dxn, dyn, 1): t + z * M @ (dxn, dyn, 1);
    # yaw-only rotation leaves y untouched
    cd = math.cos(yaw1 - yaw0)
    sd = math.sin(yaw1 - yaw0)
    one_minus_cd = 2.0 * math.sin(0.5 * (yaw1 - yaw0)) ** 2
    bx = pos0[0] - pos1[0]
    by = pos0[1] - pos1[1]
    tx = bx * s1 - by * c1
    ty = -(pos0[2] - pos1[2])
    tz = bx * c1 + by * s1
    inv_f = 1.0 / f
    Wf = float(W)
    Hf = float(H)
    n_near = 0
    for j in range(H):
        v = j + 0.5
        dyn = (v - cy) * inv_f
        ky = ty - dyn * tz
        kyz = dyn * one_minus_cd
        for i in range(W):
            u = i + 0.5
            dxn = (u - cx) * inv_f
            z = depth[j, i]
            z1 = tz + z * (cd - sd * dxn)
            n_near += z1 <= _EPS_Z
            # displacement written relative to the source ray so that a
            # zero relative motion gives exactly zero flow
            q = f / max(z1, _EPS_Z)
            du = q * (tx - dxn * tz + z * sd * (1.0 + dxn * dxn))
            dv = q * (ky + z * (kyz + dyn * sd * dxn))
            # keep the target inside the image
            raw[j, i, 0] = min(max(du, -u), Wf - u)
            raw[j, i, 1] = min(max(dv, -v), Hf - v)
    if n_near:
        # points at or behind the target camera: clamped absolute projection
        q = f / _EPS_Z
        for j in range(H):
            v = j + 0.5
            dyn = (v - cy) * inv_f
            for i in range(W):
                u = i + 0.5
                dxn = (u - cx) * inv_f
                z = depth[j, i]
                if tz + z * (cd - sd * dxn) <= _EPS_Z:
                    du = cx + (tx + z * (cd * dxn + sd)) * q - u
                    dv = cy + (ty + z * dyn) * q - v
                    raw[j, i, 0] = min(max(du, -u), Wf - u)
                    raw[j, i, 1] = min(max(dv, -v), Hf - v)
    for j in range(H):
        for i in range(W):
            a = raw[j, i, 0]
            b = raw[j, i, 1]
            # floor via truncation of a shifted positive value
            si = min(max(int(i + 1024.5 - a) - 1024, 0), W - 1)
            sj = min(max(int(j + 1024.5 - b) - 1024, 0), H - 1)
            flow[j, i, 0] = raw[sj, si, 0]
            flow[j, i, 1] = raw[sj, si, 1]


@numba.njit(cache=True, parallel=True)
def render_batch_kernel(
    kinds, params, offsets, scene_index, grounds, poses, prev_poses, prev_depth, have_prev, f, cx, cy, far, depth, flow
):
    """Render depth at ``poses`` and flow from ``prev_depth``/``prev_poses``.

    ``scene_index[b]`` selects the scene of camera ``b``.  Returns the
    per-camera degenerate-pose flags.
    """
    B = poses.shape[0]
    H = depth.shape[1]
    W = depth.shape[2]
    bad = np.zeros(B, dtype=np.bool_)
    for b in numba.prange(B):
        sc = scene_index[b]
        ids = np.empty((H, W), dtype=np.int32)
        bad[b] = _render_into(
            depth[b], ids, kinds, params, offsets[sc], offsets[sc + 1], grounds[sc],
            poses[b, :3], poses[b, 3], f, cx, cy, far,
        )
        if have_prev[b]:
            raw = np.empty((H, W, 2))
            _reproject_into(flow[b], raw, prev_depth[b], prev_poses[b, :3], prev_poses[b, 3],
                            poses[b, :3], poses[b, 3], f, cx, cy)
        else:
            flow[b, :, :, :] = 0.0
    return bad


# ---------------------------------------------------------------------------
# public API


def ray_depth(scene: Scene, pose: Pose, intr: CameraIntrinsics) -> DepthImage:
    """Depth (optical-axis distance) of the nearest surface for every pixel.

    Raises:
        DegeneratePoseError: the camera is inside a primitive or below ground.
    """
    depth = np.empty((intr.height, intr.width))
    ids = np.empty((intr.height, intr.width), dtype=np.int32)
    pos = np.asarray(pose.position, dtype=np.float64)
    bad = _render_into(
        depth, ids, scene.kinds, scene.params.reshape(-1, 6), 0, len(scene.primitives),
        scene.ground, pos, pose.yaw, intr.focal, intr.cx, intr.cy, float(intr.depth_far),
    )
    if bad:
        raise DegeneratePoseError(f"camera at {pose.position} is inside an obstacle")
    return DepthImage(depth, intr, pose, ids)


class BatchRenderer:
    """Render depth and flow for many cameras (possibly different scenes) at once.

    Stateless apart from packed scene arrays; each call is independent.
    """

    def __init__(self, scenes, intr: CameraIntrinsics):
        self.intr = intr
        self.kinds, self.params, self.offsets, self.grounds = pack_scenes(scenes)

    def render(self, scene_index, poses, prev_poses=None, prev_depth=None, have_prev=None):
        intr = self.intr
        poses = np.ascontiguousarray(poses, dtype=np.float64)
        B = poses.shape[0]
        depth = np.empty((B, intr.height, intr.width))
        flow = np.empty((B, intr.height, intr.width, 2))
        if prev_depth is None:
            prev_depth = depth
            prev_poses = poses
            have_prev = np.zeros(B, dtype=bool)
        bad = render_batch_kernel(
            self.kinds, self.params, self.offsets, np.asarray(scene_index, dtype=np.int64), self.grounds,
            poses, np.ascontiguousarray(prev_poses, dtype=np.float64), prev_depth,
            np.asarray(have_prev, dtype=bool), intr.focal, intr.cx, intr.cy, float(intr.depth_far), depth, flow,
        )
        return depth, flow, bad


# ---------------------------------------------------------------------------
# depth dumps


DEPTH_MAGIC = b"DPTH"


def write_depth_pgm(depth: DepthImage, path) -> None:
    """16-bit binary PGM, depth mapped linearly from [0, far] to [0, 65535]."""
    far = depth.intrinsics.depth_far
    h, w = depth.values.shape
    q = np.clip(np.rint(depth.values / far * 65535.0), 0, 65535).astype(">u2")
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        fh.write(q.tobytes())


def read_depth_pgm(path, far: float) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P5" or int(parts[3]) != 65535:
        raise ContractViolation("not a 16-bit P5 PGM")
    w, h = int(parts[1]), int(parts[2])
    q = np.frombuffer(parts[4][: 2 * w * h], dtype=">u2").reshape(h, w)
    return q.astype(np.float64) * far / 65535.0


def write_depth_raw(values: np.ndarray, path) -> None:
    """Exact float32 sidecar: ``DPTH``, u32 width, u32 height, row-major LE data."""
    h, w = values.shape
    with open(path, "wb") as fh:
        fh.write(DEPTH_MAGIC + struct.pack("<II", w, h))
        fh.write(np.ascontiguousarray(values, dtype="<f4").tobytes())


def read_depth_raw(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != DEPTH_MAGIC:
        raise ContractViolation("bad depth sidecar magic")
    w, h = struct.unpack("<II", data[4:12])
    if len(data) != 12 + 4 * w * h:
        raise ContractViolation("depth sidecar truncated")
    return np.frombuffer(data[12:], dtype="<f4").reshape(h, w).copy()
