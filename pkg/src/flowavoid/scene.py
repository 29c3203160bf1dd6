"""Obstacle scenes built from spheres, axis-aligned boxes and vertical cylinders.

Primitives are stored packed as ``(kind, params[6])`` rows so the numba
kernels here and in :mod:`flowavoid.render` can loop over them without Python
objects.  Parameter rows:

    sphere    cx cy cz  r   0   0
    box       cx cy cz  hx  hy  hz     (half extents)
    cylinder  cx cy cz  r   h   0      (full height, axis = world z)
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numba
import numpy as np

from .errors import ContractViolation, GenerationError

SPHERE, BOX, CYLINDER = 0, 1, 2
KIND_NAMES = {SPHERE: "sphere", BOX: "box", CYLINDER: "cylinder"}
KIND_CODES = {v: k for k, v in KIND_NAMES.items()}
_SIZE_LEN = {SPHERE: 1, BOX: 3, CYLINDER: 2}

SCENE_FORMAT = "flowavoid-scene"
SCENE_VERSION = 1


@dataclass(frozen=True)
class Primitive:
    """One obstacle.

    ``size`` is ``(radius,)`` for a sphere, ``(hx, hy, hz)`` half extents for a
    box and ``(radius, height)`` for a vertical cylinder.
    """

    kind: str
    center: tuple[float, float, float]
    size: tuple[float, ...]

    def __post_init__(self):
        if self.kind not in KIND_CODES:
            raise ContractViolation(f"unknown primitive kind {self.kind!r}")
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))
        object.__setattr__(self, "size", tuple(float(s) for s in self.size))
        if len(self.center) != 3:
            raise ContractViolation("center must be a 3-vector")
        if len(self.size) != _SIZE_LEN[KIND_CODES[self.kind]]:
            raise ContractViolation(f"{self.kind} needs {_SIZE_LEN[KIND_CODES[self.kind]]} size values")
        if not all(s > 0 and math.isfinite(s) for s in self.size):
            raise ContractViolation("primitive sizes must be strictly positive")

    def packed(self) -> tuple[int, np.ndarray]:
        row = np.zeros(6)
        row[:3] = self.center
        row[3 : 3 + len(self.size)] = self.size
        return KIND_CODES[self.kind], row


def sphere(center, radius) -> Primitive:
    return Primitive("sphere", tuple(center), (radius,))


def box(center, half_extents) -> Primitive:
    return Primitive("box", tuple(center), tuple(half_extents))


def cylinder(center, radius, height) -> Primitive:
    return Primitive("cylinder", tuple(center), (radius, height))


@dataclass(frozen=True)
class Scene:
    """Immutable obstacle environment.

    Attributes:
        primitives: obstacle list.
        bounds: ``((xmin, ymin, zmin), (xmax, ymax, zmax))`` in metres.
        ground_plane_z: height of an infinite ground plane, or None.
        seed: generator seed this scene came from (metadata only).
    """

    primitives: tuple[Primitive, ...] = ()
    bounds: tuple[tuple[float, float, float], tuple[float, float, float]] = (
        (-20.0, -20.0, 0.0),
        (20.0, 20.0, 5.0),
    )
    ground_plane_z: float | None = None
    seed: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "primitives", tuple(self.primitives))
        lo, hi = (tuple(float(v) for v in b) for b in self.bounds)
        object.__setattr__(self, "bounds", (lo, hi))
        if not all(a < b for a, b in zip(lo, hi)):
            raise ContractViolation("bounds must have min < max on every axis")
        for prim in self.primitives:
            if not all(a <= c <= b for a, c, b in zip(lo, prim.center, hi)):
                raise ContractViolation(f"primitive center {prim.center} outside scene bounds")

    @cached_property
    def kinds(self) -> np.ndarray:
        return np.array([KIND_CODES[p.kind] for p in self.primitives], dtype=np.int64)

    @cached_property
    def params(self) -> np.ndarray:
        out = np.zeros((len(self.primitives), 6))
        for i, p in enumerate(self.primitives):
            out[i] = p.packed()[1]
        return out

    @property
    def ground(self) -> float:
        """Ground height for kernels; NaN when there is no ground plane."""
        return math.nan if self.ground_plane_z is None else float(self.ground_plane_z)

    def with_primitive(self, prim: Primitive) -> Scene:
        return Scene(self.primitives + (prim,), self.bounds, self.ground_plane_z, self.seed)

    def contains(self, point, margin: float = 0.0) -> bool:
        lo, hi = self.bounds
        return all(a - margin <= p <= b + margin for a, p, b in zip(lo, point, hi))


def pack_scenes(scenes: Sequence[Scene]):
    """Concatenate several scenes for batched kernels.

    Returns:
        ``(kinds, params, offsets, grounds)`` where scene ``i`` owns rows
        ``offsets[i]:offsets[i+1]``.
    """
    counts = [len(s.primitives) for s in scenes]
    offsets = np.zeros(len(scenes) + 1, dtype=np.int64)
    offsets[1:] = np.cumsum(counts)
    if offsets[-1]:
        kinds = np.concatenate([s.kinds for s in scenes if s.primitives])
        params = np.concatenate([s.params for s in scenes if s.primitives])
    else:
        kinds = np.zeros(0, dtype=np.int64)
        params = np.zeros((0, 6))
    grounds = np.array([s.ground for s in scenes])
    return kinds, params, offsets, grounds


# ---------------------------------------------------------------------------
# signed distance with first and second derivatives


@numba.njit(cache=True)
def _sdf_primitive(kind, prm, p, g, H):
    """Signed distance of ``p`` to one primitive; fills gradient and Hessian."""
    for i in range(3):
        g[i] = 0.0
        for j in range(3):
            H[i, j] = 0.0
    ex = p[0] - prm[0]
    ey = p[1] - prm[1]
    ez = p[2] - prm[2]
    if kind == SPHERE:
        n = math.sqrt(ex * ex + ey * ey + ez * ez)
        if n == 0.0:
            g[2] = 1.0
            return -prm[3]
        g[0] = ex / n
        g[1] = ey / n
        g[2] = ez / n
        for i in range(3):
            for j in range(3):
                H[i, j] = ((1.0 if i == j else 0.0) - g[i] * g[j]) / n
        return n - prm[3]
    if kind == BOX:
        e = (ex, ey, ez)
        a0 = abs(ex) - prm[3]
        a1 = abs(ey) - prm[4]
        a2 = abs(ez) - prm[5]
        a = (a0, a1, a2)
        if a0 > 0.0 or a1 > 0.0 or a2 > 0.0:
            ss = 0.0
            for i in range(3):
                if a[i] > 0.0:
                    ss += a[i] * a[i]
            d = math.sqrt(ss)
            for i in range(3):
                if a[i] > 0.0:
                    s = 1.0 if e[i] >= 0.0 else -1.0
                    g[i] = s * a[i] / d
            for i in range(3):
                for j in range(3):
                    act = 1.0 if (i == j and a[i] > 0.0) else 0.0
                    H[i, j] = (act - g[i] * g[j]) / d
            return d
        k = 0
        if a1 > a[k]:
            k = 1
        if a2 > a[k]:
            k = 2
        g[k] = 1.0 if e[k] >= 0.0 else -1.0
        return a[k]
    # vertical cylinder
    rho = math.sqrt(ex * ex + ey * ey)
    if rho > 0.0:
        nx = ex / rho
        ny = ey / rho
    else:
        nx = 1.0
        ny = 0.0
    sz = 1.0 if ez >= 0.0 else -1.0
    ar = rho - prm[3]
    az = abs(ez) - 0.5 * prm[4]
    if ar > 0.0 or az > 0.0:
        mr = ar if ar > 0.0 else 0.0
        mz = az if az > 0.0 else 0.0
        d = math.sqrt(mr * mr + mz * mz)
        g[0] = mr * nx / d
        g[1] = mr * ny / d
        g[2] = mz * sz / d
        if ar > 0.0:
            nn = (nx, ny)
            for i in range(2):
                for j in range(2):
                    H[i, j] += nn[i] * nn[j] + mr * ((1.0 if i == j else 0.0) - nn[i] * nn[j]) / rho
        if az > 0.0:
            H[2, 2] += 1.0
        for i in range(3):
            for j in range(3):
                H[i, j] = (H[i, j] - g[i] * g[j]) / d
        return d
    if ar >= az:
        g[0] = nx
        g[1] = ny
        if rho > 0.0:
            H[0, 0] = (1.0 - nx * nx) / rho
            H[0, 1] = -nx * ny / rho
            H[1, 0] = -nx * ny / rho
            H[1, 1] = (1.0 - ny * ny) / rho
        return ar
    g[2] = sz
    return az


@numba.njit(cache=True)
def _sdf_scene(kinds, params, lo, hi, p, g, H):
    best = np.inf
    gt = np.zeros(3)
    Ht = np.zeros((3, 3))
    for i in range(3):
        g[i] = 0.0
        for j in range(3):
            H[i, j] = 0.0
    for k in range(lo, hi):
        d = _sdf_primitive(kinds[k], params[k], p, gt, Ht)
        if d < best:
            best = d
            g[:] = gt
            H[:, :] = Ht
    return best


@numba.njit(cache=True)
def sdf_batch(kinds, params, offsets, points):
    """Signed distance, gradient and Hessian for ``points[i]`` in scene ``i``."""
    n = points.shape[0]
    d = np.empty(n)
    G = np.zeros((n, 3))
    H = np.zeros((n, 3, 3))
    for i in range(n):
        d[i] = _sdf_scene(kinds, params, offsets[i], offsets[i + 1], points[i], G[i], H[i])
    return d, G, H


def signed_distance(scene: Scene, point):
    """Signed distance to the nearest primitive with gradient and Hessian.

    Returns ``(+inf, 0, 0)`` for an empty scene.  The ground plane is not an
    obstacle for this query.
    """
    p = np.asarray(point, dtype=np.float64).reshape(1, 3)
    offsets = np.array([0, len(scene.primitives)], dtype=np.int64)
    d, G, H = sdf_batch(scene.kinds, scene.params.reshape(-1, 6), offsets, p)
    return float(d[0]), G[0], H[0]


def closest_distance(scene: Scene, point) -> tuple[float, np.ndarray]:
    """Distance to the nearest obstacle surface and the unit direction toward it.

    The distance is negative inside a primitive.  An empty scene returns
    ``(inf, zeros(3))``.
    """
    d, g, _ = signed_distance(scene, point)
    if not math.isfinite(d):
        return math.inf, np.zeros(3)
    # toward the surface: against the gradient outside, along it inside
    return d, (-g if d >= 0 else g)


# ---------------------------------------------------------------------------
# procedural generation


@dataclass
class GenConfig:
    """Parameters for :func:`generate_scene`.

    Densities are obstacles per square metre of free ground area.
    """

    density: float = 0.08
    bounds: tuple = ((-20.0, -20.0, 0.0), (20.0, 20.0, 5.0))
    radius_range: tuple[float, float] = (0.3, 1.5)
    kind_weights: dict = field(default_factory=lambda: {"cylinder": 0.6, "sphere": 0.2, "box": 0.2})
    cylinder_height_range: tuple[float, float] = (3.0, 5.0)
    sphere_z_range: tuple[float, float] = (0.5, 4.0)
    box_half_height_range: tuple[float, float] = (0.5, 2.5)
    start: tuple = (-18.0, 0.0, 1.5)
    goal: tuple = (18.0, 0.0, 1.5)
    clearance: float = 2.0
    ground_plane_z: float | None = 0.0
    max_retries: int = 1000

    def validate(self):
        if self.density < 0:
            raise ContractViolation("density must be >= 0")
        lo, hi = self.radius_range
        if not 0 < lo <= hi:
            raise ContractViolation("radius_range must be positive and ordered")
        if self.clearance <= 0:
            raise ContractViolation("clearance radius must be > 0")
        if not self.kind_weights or any(w < 0 for w in self.kind_weights.values()):
            raise ContractViolation("kind_weights must be non-negative")
        for k in self.kind_weights:
            if k not in KIND_CODES:
                raise ContractViolation(f"unknown kind {k!r}")

    def free_area(self) -> float:
        (x0, y0, _), (x1, y1, _) = self.bounds
        return (x1 - x0) * (y1 - y0) - 2 * math.pi * self.clearance**2

    def expected_count(self) -> float:
        return self.density * max(self.free_area(), 0.0)


def _sample_primitive(rng: np.random.Generator, cfg: GenConfig, kinds, probs) -> Primitive:
    (x0, y0, z0), (x1, y1, z1) = cfg.bounds
    kind = kinds[rng.choice(len(kinds), p=probs)]
    x = rng.uniform(x0, x1)
    y = rng.uniform(y0, y1)
    r = rng.uniform(*cfg.radius_range)
    if kind == "cylinder":
        h = rng.uniform(*cfg.cylinder_height_range)
        zc = min(max(z0 + 0.5 * h, z0), z1)
        return cylinder((x, y, zc), r, h)
    if kind == "sphere":
        zc = rng.uniform(*cfg.sphere_z_range)
        return sphere((x, y, min(max(zc, z0), z1)), r)
    hx, hy = rng.uniform(*cfg.radius_range, size=2)
    hz = rng.uniform(*cfg.box_half_height_range)
    return box((x, y, min(max(z0 + hz, z0), z1)), (hx, hy, hz))


def generate_scene(seed: int, cfg: GenConfig | None = None) -> Scene:
    """Random obstacle field, deterministic in ``seed``.

    The obstacle count is Poisson with mean ``density * free_area``.  Each
    obstacle is placed uniformly and resampled while it intrudes on the start
    or goal clearance sphere.

    Raises:
        GenerationError: a primitive could not be placed within
            ``cfg.max_retries`` attempts.
    """
    cfg = cfg or GenConfig()
    cfg.validate()
    rng = np.random.default_rng(seed)
    count = int(rng.poisson(cfg.expected_count()))
    kinds = sorted(k for k, w in cfg.kind_weights.items() if w > 0)
    weights = np.array([cfg.kind_weights[k] for k in kinds], dtype=float)
    probs = weights / weights.sum()
    keep_out = np.array([cfg.start, cfg.goal], dtype=float)
    prims = []
    for _ in range(count):
        for _attempt in range(cfg.max_retries):
            prim = _sample_primitive(rng, cfg, kinds, probs)
            code, row = prim.packed()
            ok = True
            for q in keep_out:
                d = _sdf_primitive(code, row, q, np.zeros(3), np.zeros((3, 3)))
                if d < cfg.clearance:
                    ok = False
                    break
            if ok:
                prims.append(prim)
                break
        else:
            raise GenerationError(f"could not place primitive after {cfg.max_retries} attempts")
    return Scene(tuple(prims), cfg.bounds, cfg.ground_plane_z, seed)


# ---------------------------------------------------------------------------
# scene file: a JSON header line followed by one JSON record per primitive


def dumps_scene(scene: Scene) -> str:
    header = {
        "format": SCENE_FORMAT,
        "version": SCENE_VERSION,
        "seed": scene.seed,
        "bounds": [list(scene.bounds[0]), list(scene.bounds[1])],
        "ground_plane_z": scene.ground_plane_z,
        "count": len(scene.primitives),
    }
    lines = [json.dumps(header)]
    for p in scene.primitives:
        lines.append(json.dumps({"kind": p.kind, "center": list(p.center), "size": list(p.size)}))
    return "\n".join(lines) + "\n"


def loads_scene(text: str) -> Scene:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise ContractViolation("empty scene file")
    try:
        header = json.loads(lines[0])
        if header.get("format") != SCENE_FORMAT:
            raise ContractViolation("not a scene file")
        if header.get("version") != SCENE_VERSION:
            raise ContractViolation(f"unsupported scene version {header.get('version')}")
        prims = []
        for ln in lines[1:]:
            rec = json.loads(ln)
            prims.append(Primitive(rec["kind"], tuple(rec["center"]), tuple(rec["size"])))
        if len(prims) != header["count"]:
            raise ContractViolation(f"expected {header['count']} primitives, found {len(prims)}")
        bounds = (tuple(header["bounds"][0]), tuple(header["bounds"][1]))
        return Scene(tuple(prims), bounds, header["ground_plane_z"], header["seed"])
    except (json.JSONDecodeError, KeyError, TypeError, AttributeError, IndexError) as exc:
        raise ContractViolation(f"malformed scene file: {exc!r}") from exc


def save_scene(scene: Scene, path) -> None:
    Path(path).write_text(dumps_scene(scene))


def load_scene(path) -> Scene:
    return loads_scene(Path(path).read_text())
