import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowavoid.errors import ContractViolation, DegeneratePoseError
from flowavoid.render import (
    BatchRenderer,
    CameraIntrinsics,
    Pose,
    camera_axes,
    ray_depth,
    read_depth_pgm,
    read_depth_raw,
    write_depth_pgm,
    write_depth_raw,
)
from flowavoid.scene import Scene, box, closest_distance, cylinder, generate_scene, sphere


def pixel_rays(intr, yaw):
    """World-frame ray directions (unnormalized, unit optical-axis component)."""
    x, y = intr.pixel_grid()
    right, down, fwd = camera_axes(yaw)
    return x[..., None] * right + y[..., None] * down + fwd


def slab_oracle(origin, dirs, center, half):
    """Independent ray/box slab test; returns ray parameter of entry or inf."""
    lo = np.asarray(center) - half
    hi = np.asarray(center) + half
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (lo - origin) / dirs
        t2 = (hi - origin) / dirs
    tmin = np.nanmax(np.minimum(t1, t2), axis=-1)
    tmax = np.nanmin(np.maximum(t1, t2), axis=-1)
    hit = (tmax >= tmin) & (tmax > 0)
    return np.where(hit, np.where(tmin > 0, tmin, np.inf), np.inf)


def sphere_oracle(origin, dirs, center, r):
    oc = origin - np.asarray(center)
    a = (dirs * dirs).sum(-1)
    b = 2 * (dirs * oc).sum(-1)
    c = (oc * oc).sum() - r * r
    disc = b * b - 4 * a * c
    t = (-b - np.sqrt(np.maximum(disc, 0))) / (2 * a)
    return np.where((disc >= 0) & (t > 0), t, np.inf)


def test_empty_scene_is_all_far():
    intr = CameraIntrinsics()
    d = ray_depth(Scene(()), Pose((0, 0, 1), 0.3), intr)
    assert np.all(d.values == intr.depth_far)


def test_sphere_on_axis_center_pixel_depth():
    # odd dimensions put one pixel centre exactly on the optical axis
    intr = CameraIntrinsics(width=65, height=49)
    sc = Scene((sphere((5.0, 0.0, 1.0), 1.0),))
    d = ray_depth(sc, Pose((0.0, 0.0, 1.0), 0.0), intr)
    assert d.values[24, 32] == pytest.approx(4.0, abs=1e-12)


def test_box_matches_slab_oracle_exactly():
    intr = CameraIntrinsics(width=64, height=48, horizontal_fov=90.0)
    center, half = np.array([5.0, 0.0, 1.5]), np.array([1.0, 1.0, 1.0])
    sc = Scene((box(center, half),))
    pose = Pose((0.0, 0.0, 1.5), 0.0)
    d = ray_depth(sc, pose, intr).values
    t = slab_oracle(np.array(pose.position), pixel_rays(intr, 0.0), center, half)
    expect = np.where(np.isfinite(t), t, intr.depth_far)
    np.testing.assert_allclose(d, expect, rtol=0, atol=1e-12)
    assert np.isfinite(t).sum() > 100


@settings(max_examples=30, deadline=None)
@given(
    st.floats(-3.0, 3.0), st.floats(-3.0, 3.0), st.floats(0.5, 4.5), st.floats(-np.pi, np.pi),
    st.floats(0.2, 2.0), st.floats(0.2, 2.0), st.floats(0.2, 2.0),
)
def test_random_boxes_and_spheres_match_oracles(px, py, pz, yaw, hx, hy, hz):
    intr = CameraIntrinsics(width=32, height=24, horizontal_fov=100.0)
    center = np.array([6.0, 1.0, 2.0])
    half = np.array([hx, hy, hz])
    origin = np.array([px, py, pz])
    dirs = pixel_rays(intr, yaw)
    d = ray_depth(Scene((box(center, half),)), Pose(origin, yaw), intr).values
    t = slab_oracle(origin, dirs, center, half)
    np.testing.assert_allclose(d, np.where(np.isfinite(t), t, intr.depth_far), atol=1e-9)
    d = ray_depth(Scene((sphere(center, hx),)), Pose(origin, yaw), intr).values
    t = sphere_oracle(origin, dirs, center, hx)
    np.testing.assert_allclose(d, np.where(np.isfinite(t), t, intr.depth_far), atol=1e-9)


def test_cylinder_matches_dense_marching():
    intr = CameraIntrinsics(width=32, height=24)
    sc = Scene((cylinder((4.0, 0.5, 2.0), 0.8, 3.0),))
    origin = np.array([0.0, 0.0, 1.0])
    d = ray_depth(sc, Pose(origin, 0.1), intr).values
    dirs = pixel_rays(intr, 0.1)
    # march along each ray in small steps and find the first inside sample
    ts = np.arange(0.0, 12.0, 1e-3)
    for i in range(0, 24, 3):
        for j in range(0, 32, 3):
            pts = origin + ts[:, None] * dirs[i, j]
            inside = (np.hypot(pts[:, 0] - 4.0, pts[:, 1] - 0.5) <= 0.8) & (np.abs(pts[:, 2] - 2.0) <= 1.5)
            expect = ts[np.argmax(inside)] if inside.any() else intr.depth_far
            assert d[i, j] == pytest.approx(expect, abs=2e-3)


def test_ground_plane_rows():
    intr = CameraIntrinsics()
    d = ray_depth(Scene((), ground_plane_z=0.0), Pose((0, 0, 1.0), 0.0), intr).values
    # bottom half sees the ground at depth h / y_normalized
    x, y = intr.pixel_grid()
    expect = np.where(y > 1.0 / intr.depth_far, 1.0 / np.maximum(y, 1e-12), intr.depth_far)
    expect = np.minimum(expect, intr.depth_far)
    np.testing.assert_allclose(d, expect, atol=1e-9)


def test_camera_inside_primitive_raises():
    sc = Scene((sphere((0, 0, 2), 1.0),))
    with pytest.raises(DegeneratePoseError):
        ray_depth(sc, Pose((0, 0, 2.2), 0.0), CameraIntrinsics())


def test_intrinsics_validation():
    with pytest.raises(ContractViolation):
        CameraIntrinsics(horizontal_fov=180.0)
    with pytest.raises(ContractViolation):
        CameraIntrinsics(width=0)


def test_focal_from_fov():
    assert CameraIntrinsics(width=64, horizontal_fov=90.0).focal == pytest.approx(32.0)


def test_depth_monotone_when_adding_primitives():
    intr = CameraIntrinsics()
    base = generate_scene(5)
    pose = Pose((-18.0, 0.0, 1.5), 0.0)
    d0 = ray_depth(base, pose, intr).values
    extra = base.with_primitive(sphere((-12.0, 0.5, 1.5), 0.8))
    d1 = ray_depth(extra, pose, intr).values
    assert np.all(d1 <= d0)
    assert np.any(d1 < d0)


def test_center_ray_not_closer_than_clearance():
    intr = CameraIntrinsics(width=65, height=49)
    sc = generate_scene(2)
    rng = np.random.default_rng(0)
    for _ in range(50):
        p = rng.uniform([-18, -18, 0.5], [18, 18, 4.5])
        dist, _ = closest_distance(sc, p)
        if dist <= 0.05:
            continue
        d = ray_depth(sc, Pose(p, rng.uniform(-3, 3)), intr).values
        assert d[24, 32] >= dist - 1e-9


def test_batch_renderer_matches_single_render():
    intr = CameraIntrinsics()
    scenes = [generate_scene(1), generate_scene(2)]
    poses = np.array([[-18.0, 0.0, 1.5, 0.2], [18.0, 0.0, 1.5, -2.0]])
    r = BatchRenderer(scenes, intr)
    depth, flow, bad = r.render(np.array([0, 1]), poses)
    assert not bad.any()
    assert np.all(flow == 0)
    for b in range(2):
        single = ray_depth(scenes[b], Pose(poses[b, :3], poses[b, 3]), intr).values
        np.testing.assert_array_equal(depth[b], single)


def test_render_deterministic():
    sc = generate_scene(9)
    a = ray_depth(sc, Pose((-18, 0, 1.5), 0.1), CameraIntrinsics()).values
    b = ray_depth(sc, Pose((-18, 0, 1.5), 0.1), CameraIntrinsics()).values
    assert np.array_equal(a, b)


def test_depth_dumps_round_trip(tmp_path):
    intr = CameraIntrinsics()
    img = ray_depth(generate_scene(4), Pose((-18, 0, 1.5), 0.0), intr)
    write_depth_raw(img.values, tmp_path / "d.dpth")
    np.testing.assert_array_equal(read_depth_raw(tmp_path / "d.dpth"), img.values.astype(np.float32))
    write_depth_pgm(img, tmp_path / "d.pgm")
    back = read_depth_pgm(tmp_path / "d.pgm", intr.depth_far)
    assert np.abs(back - img.values).max() <= intr.depth_far / 65535 / 2 + 1e-12
    raw = (tmp_path / "d.dpth").read_bytes()
    assert raw[:4] == b"DPTH"
    assert int.from_bytes(raw[4:8], "little") == 64 and int.from_bytes(raw[8:12], "little") == 48
