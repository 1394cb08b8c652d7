import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.spatial.transform import Rotation

from vsls import se3
from vsls.se3 import DistanceWeights, Pose, Twist


def rand_pose(rng, scale=1.0):
    return Pose(rng.normal(size=3) * scale, rng.normal(size=4))


def as_matrix(p):
    return p.matrix()


def same_pose(a, b, tol=1e-9):
    return (np.allclose(a.t, b.t, atol=tol, rtol=0)
            and se3.rotation_angle(a.q, b.q) < tol)


seeds = st.integers(0, 2**32 - 1)


# -- quaternion helpers ----------------------------------------------------

def test_quat_matrix_matches_scipy():
    rng = np.random.default_rng(0)
    for _ in range(50):
        q = se3.quat_normalize(rng.normal(size=4))
        ref = Rotation.from_quat([q[1], q[2], q[3], q[0]]).as_matrix()
        assert np.allclose(se3.quat_to_matrix(q), ref, atol=1e-12)
        back = se3.matrix_to_quat(ref)
        assert se3.rotation_angle(back, q) < 1e-9
        assert back[0] >= 0


def test_euler_is_intrinsic_xyz():
    r, p, y = 0.1, -0.2, 0.3
    ref = Rotation.from_euler("XYZ", [r, p, y]).as_matrix()
    assert np.allclose(se3.quat_to_matrix(se3.euler_xyz_quat(r, p, y)), ref, atol=1e-12)


def test_zero_quaternion_rejected():
    with pytest.raises(ValueError):
        se3.quat_normalize([0, 0, 0, 0])


def test_twist_must_be_finite():
    with pytest.raises(ValueError):
        Twist([np.nan, 0, 0], [0, 0, 0])


# -- compose / inverse -----------------------------------------------------

def test_compose_identity():
    p = rand_pose(np.random.default_rng(1))
    assert same_pose(se3.compose(Pose.identity(), p), p)
    assert same_pose(se3.compose(p, Pose.identity()), p)


def test_compose_with_inverse_is_identity():
    p = rand_pose(np.random.default_rng(2))
    assert same_pose(se3.compose(p, se3.inverse(p)), Pose.identity())


def test_two_quarter_turns_make_half_turn():
    qz = se3.axis_angle_quat([0, 0, 1], math.pi / 2)
    a = Pose([0, 0, 0], qz)
    c = se3.compose(a, a)
    Rz = Rotation.from_euler("z", 90, degrees=True).as_matrix()
    assert np.allclose(c.R, Rz @ Rz, atol=1e-12)
    assert math.isclose(se3.rotation_angle(c.q, Pose.identity().q), math.pi, abs_tol=1e-9)


def test_inverse_examples():
    assert same_pose(se3.inverse(Pose.identity()), Pose.identity())
    p = se3.inverse(Pose([1, 0, 0]))
    assert np.allclose(p.t, [-1, 0, 0])


def test_inverse_matches_homogeneous_oracle():
    rng = np.random.default_rng(3)
    for _ in range(100):
        p = rand_pose(rng)
        ref = np.linalg.inv(as_matrix(p))
        assert np.allclose(as_matrix(se3.inverse(p)), ref, atol=1e-9)


def test_compose_matches_matrix_product():
    rng = np.random.default_rng(4)
    for _ in range(100):
        a, b = rand_pose(rng), rand_pose(rng)
        assert np.allclose(as_matrix(se3.compose(a, b)), as_matrix(a) @ as_matrix(b), atol=1e-9)


@settings(max_examples=200, deadline=None)
@given(seeds)
def test_group_laws(seed):
    rng = np.random.default_rng(seed)
    a, b, c = rand_pose(rng), rand_pose(rng), rand_pose(rng)
    lhs = se3.compose(se3.compose(a, b), c)
    rhs = se3.compose(a, se3.compose(b, c))
    assert same_pose(lhs, rhs)
    assert same_pose(se3.inverse(se3.inverse(a)), a)
    for p in (lhs, rhs):
        assert abs(np.linalg.norm(p.q) - 1) < 1e-9


# -- rotation angle / distance -----------------------------------------------

def test_rotation_angle_examples():
    q = se3.quat_normalize([0.3, -0.2, 0.5, 0.1])
    assert se3.rotation_angle(q, q) == pytest.approx(0, abs=1e-12)
    assert se3.rotation_angle(q, -q) == pytest.approx(0, abs=1e-12)
    qx = se3.axis_angle_quat([1, 0, 0], math.pi / 2)
    R = se3.quat_to_matrix(qx)
    trace_angle = math.acos((np.trace(R) - 1) / 2)
    assert se3.rotation_angle([1, 0, 0, 0], qx) == pytest.approx(trace_angle, abs=1e-12)
    assert trace_angle == pytest.approx(math.pi / 2)


@settings(max_examples=200, deadline=None)
@given(seeds)
def test_rotation_angle_sign_invariance_and_range(seed):
    rng = np.random.default_rng(seed)
    q1, q2 = se3.quat_normalize(rng.normal(size=4)), se3.quat_normalize(rng.normal(size=4))
    a = se3.rotation_angle(q1, q2)
    assert 0 <= a <= math.pi
    for s1 in (1, -1):
        for s2 in (1, -1):
            assert abs(se3.rotation_angle(s1 * q1, s2 * q2) - a) < 1e-12
    ref = 2 * math.acos(min(1.0, abs(float(np.dot(q1, q2)))))
    assert abs(a - ref) < 1e-7  # arccos form is only accurate to ~1e-8


def test_pose_distance_examples():
    w1 = DistanceWeights(c1=1.0)
    p = rand_pose(np.random.default_rng(5))
    assert se3.pose_distance(p, p, w1) == 0
    assert se3.pose_distance(Pose([0.03, 0, 0]), Pose.identity(), w1) == pytest.approx(0.03)
    g = Pose([0.05, 0, 0], se3.axis_angle_quat([0, 1, 0], math.radians(30)))
    assert se3.pose_distance(Pose.identity(), g, w1) == pytest.approx(0.05 + 1 / 6, abs=1e-12)


def test_workspace_weights():
    w = DistanceWeights.for_workspace((0.75, 0.75, 0.6))
    assert w.c1 == pytest.approx(1 / math.sqrt(0.75**2 * 2 + 0.36))
    assert w.c2 == pytest.approx(1 / math.pi)
    with pytest.raises(ValueError):
        DistanceWeights(c1=0.0)


@settings(max_examples=200, deadline=None)
@given(seeds)
def test_distance_symmetric_and_left_invariant(seed):
    rng = np.random.default_rng(seed)
    w = DistanceWeights(c1=rng.uniform(0.1, 3), c2=rng.uniform(0.1, 3))
    p, g, x = rand_pose(rng), rand_pose(rng), rand_pose(rng)
    d = se3.pose_distance(p, g, w)
    assert abs(d - se3.pose_distance(g, p, w)) < 1e-9
    d_left = se3.pose_distance(se3.compose(x, p), se3.compose(x, g), w)
    assert abs(d - d_left) < 1e-9


# -- actions ---------------------------------------------------------------

def test_apply_action_examples():
    p = rand_pose(np.random.default_rng(6))
    assert same_pose(se3.apply_action(p, np.zeros(6)), p)
    q = se3.apply_action(Pose.identity(), [0.05, 0, 0, 0, 0, 0])
    assert np.allclose(q.t, [0.05, 0, 0])
    rz = Pose([0, 0, 0], se3.axis_angle_quat([0, 0, 1], math.pi / 2))
    moved = se3.apply_action(rz, [0.05, 0, 0, 0, 0, 0])
    expected = se3.quat_to_matrix(rz.q) @ np.array([0.05, 0, 0])
    assert np.allclose(moved.t, expected, atol=1e-12)
    assert np.allclose(moved.t, [0, 0.05, 0], atol=1e-12)


def test_apply_action_rejects_out_of_bounds():
    with pytest.raises(ValueError):
        se3.apply_action(Pose.identity(), [0.06, 0, 0, 0, 0, 0])
    with pytest.raises(ValueError):
        se3.apply_action(Pose.identity(), [0, 0, 0, 0, math.radians(6), 0])
    with pytest.raises(ValueError):
        se3.apply_action(Pose.identity(), [np.nan, 0, 0, 0, 0, 0])


@settings(max_examples=200, deadline=None)
@given(seeds, st.integers(0, 5))
def test_action_then_inverse_action_returns(seed, axis):
    rng = np.random.default_rng(seed)
    p = rand_pose(rng)
    a = np.zeros(6)
    a[axis] = rng.uniform(-1, 1) * se3.DEFAULT_ACTION_BOUNDS[axis]
    q = se3.apply_action(se3.apply_action(p, a), -a)
    assert same_pose(q, p)


# -- look-at ---------------------------------------------------------------

def test_lookat_fronto_parallel():
    p = se3.lookat_pose([0, 0, 1], [0, 0, 0])
    assert np.allclose(se3.optical_axis(p), [0, 0, -1], atol=1e-12)


def test_lookat_home_matches_convention():
    p = se3.lookat_pose([0, 0, 0.6], [0, 0, 0])
    assert np.allclose(p.R, np.diag([1.0, -1.0, -1.0]), atol=1e-12)


def test_lookat_axis_property():
    rng = np.random.default_rng(7)
    for _ in range(200):
        pos = rng.normal(size=3) + [0, 0, 1]
        tgt = rng.normal(size=3) * 0.2
        roll = rng.uniform(-math.pi, math.pi)
        p = se3.lookat_pose(pos, tgt, roll)
        d = (tgt - pos) / np.linalg.norm(tgt - pos)
        assert np.allclose(se3.optical_axis(p), d, atol=1e-9)
        assert np.allclose(p.t, pos)


def test_lookat_roll_pi_flips_up():
    a = se3.lookat_pose([0.1, 0.2, 1], [0, 0, 0], 0.0)
    b = se3.lookat_pose([0.1, 0.2, 1], [0, 0, 0], math.pi)
    assert np.allclose(a.R[:, 1], -b.R[:, 1], atol=1e-12)
    assert np.allclose(a.R[:, 2], b.R[:, 2], atol=1e-12)


def test_lookat_degenerate_direction():
    with pytest.raises(ValueError):
        se3.lookat_pose([0, 0, 0], [0, 1, 0])
    with pytest.raises(ValueError):
        se3.lookat_pose([0, 0, 0], [0, 0, 0])


# -- exponential map ---------------------------------------------------------

def test_exp_twist_matches_matrix_exponential():
    from scipy.linalg import expm

    rng = np.random.default_rng(8)
    for scale in (1e-8, 1e-3, 0.5, 2.0):
        xi = rng.normal(size=6) * scale
        X = np.zeros((4, 4))
        X[:3, :3] = se3._skew(xi[3:])
        X[:3, 3] = xi[:3]
        assert np.allclose(se3.exp_twist(xi).matrix(), expm(X), atol=1e-9)


def test_interpolate_endpoints():
    rng = np.random.default_rng(9)
    a, b = rand_pose(rng), rand_pose(rng)
    assert same_pose(se3.interpolate(a, b, 0.0), a)
    assert same_pose(se3.interpolate(a, b, 1.0), b)
    m = se3.interpolate(a, b, 0.5)
    assert se3.rotation_angle(a.q, m.q) == pytest.approx(se3.rotation_angle(m.q, b.q), abs=1e-9)


def test_pose_list_round_trip_exact():
    p = rand_pose(np.random.default_rng(10))
    q = Pose.from_list(p.to_list(), normalize=False)
    assert np.array_equal(p.t, q.t) and np.array_equal(p.q, q.q)
