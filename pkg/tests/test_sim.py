import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import ndimage

from vsls import se3
from vsls.se3 import Pose
from vsls.sim import (AugmentConfig, CameraIntrinsics, PlanarScene, SimState, Workspace, augment,
                      center_visible, home_pose, in_extent_mask, is_feasible, pixel_depth, posterize,
                      render, shift_preset, step)

K = CameraIntrinsics()


def plane_homography(scene, k, pose):
    """Plane metric coords (x, y, 1) -> pixel (u, v, 1), built from the pose directly."""
    rel = se3.compose(se3.inverse(pose), scene.plane_pose)  # plane -> camera
    R, t = rel.R, rel.t
    return k.matrix() @ np.column_stack([R[:, 0], R[:, 1], t])


def oracle_render(scene, k, pose):
    """Homography back-projection + scipy bilinear sampling; NaN outside the extent."""
    Hinv = np.linalg.inv(plane_homography(scene, k, pose))
    v, u = np.mgrid[0:k.height, 0:k.width].astype(float)
    pix = np.stack([u.ravel(), v.ravel(), np.ones(u.size)])
    pl = Hinv @ pix
    x, y = pl[0] / pl[2], pl[1] / pl[2]
    ht, wt = scene.texture.shape
    w, h = scene.extent
    col = (x / w + 0.5) * wt - 0.5
    row = (0.5 - y / h) * ht - 0.5
    vals = ndimage.map_coordinates(scene.texture, [row, col], order=1, mode="nearest")
    interior = (col >= 0) & (col <= wt - 1) & (row >= 0) & (row <= ht - 1)
    return vals.reshape(k.height, k.width), interior.reshape(k.height, k.width)


def random_view(rng, scene):
    while True:
        pos = np.array([rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3), rng.uniform(0.3, 0.9)])
        tgt = np.array([rng.uniform(-0.1, 0.1), rng.uniform(-0.1, 0.1), 0.0])
        p = se3.lookat_pose(pos, tgt, rng.uniform(-0.5, 0.5))
        if center_visible(scene, K, p):
            return p


def test_center_pixel_equals_texture_center():
    tex = np.random.default_rng(0).uniform(size=(65, 65))
    scene = PlanarScene(tex, extent=(1.0, 1.0))
    k = CameraIntrinsics(fx=50, fy=50, cx=32, cy=32, width=65, height=65)
    img = render(scene, k, home_pose(0.5))
    assert img[32, 32] == pytest.approx(tex[32, 32], abs=1e-12)


def test_homography_consistency(scenes):
    rng = np.random.default_rng(1)
    for scene in scenes:
        for _ in range(5):
            pose = random_view(rng, scene)
            img = render(scene, K, pose)
            ref, interior = oracle_render(scene, K, pose)
            mask = in_extent_mask(scene, K, pose) & interior
            assert mask.sum() > 0
            ok = np.abs(img - ref)[mask] < 1e-6
            assert ok.mean() >= 0.99


def test_tilted_plane_homography(scene):
    tilted = PlanarScene(scene.texture, Pose([0.02, -0.01, 0.0],
                                             se3.euler_xyz_quat(0.3, -0.2, 0.1)))
    pose = home_pose()
    img = render(tilted, K, pose)
    ref, interior = oracle_render(tilted, K, pose)
    mask = in_extent_mask(tilted, K, pose) & interior
    assert (np.abs(img - ref)[mask] < 1e-6).mean() >= 0.99


def test_two_view_homography_maps_pixels(scene):
    """Pixels of view 1 land where H = K (R - t n^T / d) K^-1 says in view 2."""
    p1 = home_pose()
    p2 = se3.compose(p1, se3.action_pose([0.03, -0.02, 0.04, 0.05, -0.03, 0.08]))
    rel = se3.compose(se3.inverse(p2), p1)  # cam1 -> cam2
    n = p1.R.T @ np.array([0, 0, 1.0])  # plane normal in camera-1 frame
    d = float(p1.t[2])  # distance from camera 1 to the plane
    # plane seen from camera 1: n^T X = -d  (normal points toward the camera)
    Kmat = K.matrix()
    H = Kmat @ (rel.R - np.outer(rel.t, n) / d) @ np.linalg.inv(Kmat)
    rng = np.random.default_rng(2)
    for _ in range(20):
        u, v = rng.uniform(5, 58, 2)
        z1 = pixel_depth(scene, K, p1, (u, v))
        ray = np.linalg.inv(Kmat) @ [u, v, 1.0]
        Xw = p1.R @ (ray * z1) + p1.t
        Xc2 = p2.R.T @ (Xw - p2.t)
        uv2 = (Kmat @ Xc2)[:2] / Xc2[2]
        h = H @ [u, v, 1.0]
        assert np.allclose(h[:2] / h[2], uv2, atol=1e-9)


def test_looking_away_gives_background(scene):
    up = Pose([0, 0, 0.6], [1, 0, 0, 0])  # optical axis +z: away from the plane
    img = render(scene, K, up)
    assert np.all(img == scene.background)


def test_camera_behind_plane_rejected(scene):
    with pytest.raises(ValueError):
        render(scene, K, Pose([0, 0, -0.1], home_pose().q))
    with pytest.raises(ValueError):
        render(scene, K, Pose([0, 0, 0.0], home_pose().q))


def test_render_deterministic(scene):
    p = random_view(np.random.default_rng(3), scene)
    assert np.array_equal(render(scene, K, p), render(scene, K, p))


def test_pixel_depth_examples(scene):
    assert pixel_depth(scene, K, home_pose(0.5), (K.cx, K.cy)) == pytest.approx(0.5)
    # camera at height h tilted by 45 degrees about its x axis: the axis hits at h / cos(45)
    h = 0.5
    tilt = se3.compose(home_pose(h), Pose([0, 0, 0], se3.axis_angle_quat([1, 0, 0], math.pi / 4)))
    assert pixel_depth(scene, K, tilt, (K.cx, K.cy)) == pytest.approx(h / math.cos(math.pi / 4))
    horizon = se3.compose(home_pose(h), Pose([0, 0, 0], se3.axis_angle_quat([1, 0, 0], math.pi / 2)))
    assert pixel_depth(scene, K, horizon, (K.cx, K.cy)) is None


def test_tilted_plane_depth_closed_form(scene):
    # plane rotated 45 degrees about world x; fronto camera 0.5 m above the origin
    plane = PlanarScene(scene.texture, Pose([0, 0, 0], se3.axis_angle_quat([1, 0, 0], math.pi / 4)))
    pose = home_pose(0.5)
    # the optical axis through the origin meets the plane at the origin itself
    assert pixel_depth(plane, K, pose, (K.cx, K.cy)) == pytest.approx(0.5)
    u = K.cx + 10.0
    ray = np.array([(u - K.cx) / K.fx, 0.0, 1.0])
    d = pose.R @ ray
    n = plane.plane_pose.R[:, 2]
    lam = -np.dot(n, pose.t) / np.dot(n, d)
    assert pixel_depth(plane, K, pose, (u, K.cy)) == pytest.approx(lam)


def test_feasibility_examples():
    ws = Workspace()
    assert is_feasible(home_pose(), ws)
    assert not is_feasible(Pose([10.0, 0, 0.6]), ws)
    corner = Pose(np.array(ws.hi), home_pose().q)
    assert is_feasible(corner, ws)
    assert not is_feasible(Pose([0, 0, 0.05]), Workspace(min_height=0.1))


def test_intrinsics_validation():
    with pytest.raises(ValueError):
        CameraIntrinsics(fx=-1)
    with pytest.raises(ValueError):
        CameraIntrinsics(cx=64)


def test_scene_validation():
    with pytest.raises(ValueError):
        PlanarScene(np.zeros((0, 0)))
    with pytest.raises(ValueError):
        PlanarScene(np.full((4, 4), 1.5))


# -- stepping ----------------------------------------------------------------

def make_sim(scene, **kw):
    return SimState(home_pose(), scene, K, Workspace(), np.random.default_rng(0), **kw)


def test_zero_action_keeps_pose_and_image(scene):
    sim = make_sim(scene)
    before = sim.render()
    new, img = step(sim, np.zeros(6))
    assert np.allclose(new.camera_pose.t, sim.camera_pose.t, atol=1e-15)
    assert np.array_equal(img, before)
    assert new.step_count == 1


def test_step_reaches_target_along_path(scene):
    sim = make_sim(scene)
    a = np.array([0.04, -0.03, 0.02, 0.05, -0.04, 0.06])
    new, _ = step(sim, a)
    target = se3.apply_action(sim.camera_pose, a)
    assert np.allclose(new.camera_pose.t, target.t, atol=1e-9)
    assert se3.rotation_angle(new.camera_pose.q, target.q) < 1e-9
    assert len(new.path) == 3
    total = se3.rotation_angle(sim.camera_pose.q, target.q)
    for i, p in enumerate(new.path, start=1):
        s = i / 3
        assert np.allclose(p.t, (1 - s) * sim.camera_pose.t + s * target.t, atol=1e-12)
        assert se3.rotation_angle(sim.camera_pose.q, p.q) == pytest.approx(s * total, abs=1e-9)
    assert not new.clamped


def test_step_clamps_infeasible_target(scene):
    ws = Workspace()
    sim = SimState(Pose(np.array(ws.hi) - 0.01, home_pose().q), scene, K, ws)
    new, _ = step(sim, [0.05, 0, 0, 0, 0, 0])
    assert new.clamped
    assert is_feasible(new.camera_pose, ws)


def test_step_rejects_out_of_bounds_action(scene):
    with pytest.raises(ValueError):
        step(make_sim(scene), [0.2, 0, 0, 0, 0, 0])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31))
def test_step_is_norm_bounded(seed):
    rng = np.random.default_rng(seed)
    tex = np.random.default_rng(0).uniform(size=(16, 16))
    sim = SimState(home_pose(), PlanarScene(tex), K)
    b = se3.DEFAULT_ACTION_BOUNDS
    a = rng.uniform(-b, b)
    new, _ = step(sim, a)
    rel = se3.relative(sim.camera_pose, new.camera_pose)
    assert np.all(np.abs(rel.t) <= b[:3] + 1e-12)
    assert se3.rotation_angle(rel.q, [1, 0, 0, 0]) <= np.linalg.norm(b[3:]) + 1e-12


# -- augmentation ------------------------------------------------------------

def test_augment_all_off_is_identity(scene):
    img = render(scene, K, home_pose())
    out = augment(img, AugmentConfig(), np.random.default_rng(0))
    assert np.array_equal(out, img)


def test_cutout_single_rectangle():
    img = np.full((64, 64), 0.7)
    f = 0.1
    out = augment(img, AugmentConfig(cutout_count=1, cutout_max_frac=f), np.random.default_rng(5))
    zr, zc = np.nonzero(out == 0)
    assert len(zr) > 0
    h, w = zr.max() - zr.min() + 1, zc.max() - zc.min() + 1
    assert len(zr) == h * w  # one axis-aligned rectangle
    assert h * w <= f * 64 * 64


def test_posterize_one_bit(scene):
    img = render(scene, K, home_pose())
    out = augment(img, AugmentConfig(posterize_bits=1), np.random.default_rng(0))
    assert len(np.unique(out)) <= 2
    assert len(np.unique(posterize(np.linspace(0, 1, 100), 2))) == 4


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31), st.floats(0, 0.3), st.integers(0, 3))
def test_augment_range_and_shape(seed, sigma, cut):
    rng = np.random.default_rng(seed)
    img = rng.uniform(size=(20, 24))
    cfg = AugmentConfig(cutout_count=cut, noise_sigma=sigma, brightness=(-0.3, 0.3),
                        contrast=(0.5, 1.5), posterize_bits=3)
    out = augment(img, cfg, rng)
    assert out.shape == img.shape
    assert out.min() >= 0 and out.max() <= 1


def test_augment_deterministic_given_rng():
    img = np.random.default_rng(0).uniform(size=(16, 16))
    cfg = AugmentConfig(cutout_count=2, noise_sigma=0.1)
    a = augment(img, cfg, np.random.default_rng(9))
    b = augment(img, cfg, np.random.default_rng(9))
    assert np.array_equal(a, b)


def test_augment_config_validation():
    with pytest.raises(ValueError):
        AugmentConfig(cutout_max_frac=1.5)
    with pytest.raises(ValueError):
        AugmentConfig(prob=2)
    with pytest.raises(ValueError):
        AugmentConfig(posterize_bits=0)


def test_domain_shift_preset(scene):
    shift = shift_preset("lab")
    img = render(scene, K, home_pose())
    out = shift.apply(img, np.random.default_rng(0))
    assert out.shape == img.shape and out.min() >= 0 and out.max() <= 1
    assert np.all(out[40:57, 3:22] == 0)  # persistent occluder
    with pytest.raises(ValueError):
        shift_preset("nope")
