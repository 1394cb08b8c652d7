"""Rigid-body algebra for camera poses.

Poses map camera coordinates to world coordinates: ``X_w = R(q) X_c + t``.
Quaternions are stored as ``(w, x, y, z)``. The camera frame follows the
usual computer-vision convention (x right, y down, z along the optical axis).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

# Default per-axis action bounds: 5 cm translation, 5 degrees rotation.
DEFAULT_ACTION_BOUNDS = np.array([0.05, 0.05, 0.05] + [math.radians(5.0)] * 3)

WORLD_UP = np.array([0.0, 1.0, 0.0])

_SMALL_ANGLE = 1e-8


def _as_vec(x, n: int) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64).reshape(-1)
    if a.shape != (n,):
        raise ValueError(f"expected a {n}-vector, got shape {a.shape}")
    return a


# ---------------------------------------------------------------------------
# Quaternion primitives
# ---------------------------------------------------------------------------

def quat_normalize(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q)
    if n == 0.0 or not np.isfinite(n):
        raise ValueError("cannot normalize a zero or non-finite quaternion")
    return q / n


def quat_mul(a, b) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_conj(q) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_to_matrix(q) -> np.ndarray:
    w, x, y, z = quat_normalize(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def matrix_to_quat(R) -> np.ndarray:
    """Shepperd's method; returns the representative with w >= 0."""
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * math.sqrt(tr + 1.0)
        q = np.array([0.25 * s, (R[2, 1] - R[1, 2]) / s,
                      (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s])
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = np.array([(R[2, 1] - R[1, 2]) / s, 0.25 * s,
                      (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s])
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = np.array([(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s,
                      0.25 * s, (R[1, 2] + R[2, 1]) / s])
    else:
        s = 2.0 * math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = np.array([(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s,
                      (R[1, 2] + R[2, 1]) / s, 0.25 * s])
    if q[0] < 0:
        q = -q
    return quat_normalize(q)


def axis_angle_quat(axis, angle: float) -> np.ndarray:
    axis = _as_vec(axis, 3)
    n = np.linalg.norm(axis)
    if n == 0.0:
        return np.array([1.0, 0.0, 0.0, 0.0])
    h = 0.5 * angle
    return np.concatenate([[math.cos(h)], math.sin(h) * axis / n])


def rotvec_to_quat(w) -> np.ndarray:
    w = _as_vec(w, 3)
    theta = np.linalg.norm(w)
    if theta < _SMALL_ANGLE:
        return quat_normalize(np.concatenate([[1.0], 0.5 * w]))
    return axis_angle_quat(w / theta, theta)


def quat_to_rotvec(q) -> np.ndarray:
    q = quat_normalize(q)
    if q[0] < 0:
        q = -q
    s = np.linalg.norm(q[1:])
    if s < _SMALL_ANGLE:
        return 2.0 * q[1:]
    return 2.0 * math.atan2(s, q[0]) * q[1:] / s


def euler_xyz_quat(roll: float, pitch: float, yaw: float) -> np.ndarray:
    """Intrinsic x-y-z rotation: ``Rx(roll) @ Ry(pitch) @ Rz(yaw)``."""
    qx = axis_angle_quat([1, 0, 0], roll)
    qy = axis_angle_quat([0, 1, 0], pitch)
    qz = axis_angle_quat([0, 0, 1], yaw)
    return quat_normalize(quat_mul(quat_mul(qx, qy), qz))


def slerp(q0, q1, s: float) -> np.ndarray:
    q0 = quat_normalize(q0)
    q1 = quat_normalize(q1)
    if np.dot(q0, q1) < 0:
        q1 = -q1
    rel = quat_mul(quat_conj(q0), q1)
    return quat_normalize(quat_mul(q0, rotvec_to_quat(s * quat_to_rotvec(rel))))


def rotation_angle(q1, q2) -> float:
    """Geodesic angle between two rotations, in [0, pi].

    Uses ``atan2`` on the relative quaternion; ``arccos`` of the dot product
    loses ~1e-8 of accuracy near zero.
    """
    rel = quat_mul(quat_conj(quat_normalize(q1)), quat_normalize(q2))
    return 2.0 * math.atan2(float(np.linalg.norm(rel[1:])), abs(float(rel[0])))


# ---------------------------------------------------------------------------
# Poses
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Pose:
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))
    q: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))

    def __post_init__(self):
        object.__setattr__(self, "t", _as_vec(self.t, 3).copy())
        object.__setattr__(self, "q", quat_normalize(_as_vec(self.q, 4)))

    @classmethod
    def identity(cls) -> "Pose":
        return cls()

    @classmethod
    def from_matrix(cls, T) -> "Pose":
        T = np.asarray(T, dtype=np.float64)
        return cls(T[:3, 3], matrix_to_quat(T[:3, :3]))

    @property
    def R(self) -> np.ndarray:
        return quat_to_matrix(self.q)

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.t
        return T

    def to_list(self) -> list[float]:
        return [float(v) for v in np.concatenate([self.t, self.q])]

    @classmethod
    def from_list(cls, vals, normalize: bool = True) -> "Pose":
        """Inverse of ``to_list``; ``normalize=False`` restores the stored bits exactly."""
        vals = list(vals)
        p = cls(vals[:3], vals[3:7])
        if not normalize:
            object.__setattr__(p, "q", _as_vec(vals[3:7], 4).copy())
        return p

    def __repr__(self) -> str:
        t = np.array2string(self.t, precision=4)
        q = np.array2string(self.q, precision=4)
        return f"Pose(t={t}, q={q})"


@dataclass(frozen=True, eq=False)
class Twist:
    v: np.ndarray
    w: np.ndarray

    def __post_init__(self):
        v = _as_vec(self.v, 3).copy()
        w = _as_vec(self.w, 3).copy()
        if not (np.all(np.isfinite(v)) and np.all(np.isfinite(w))):
            raise ValueError("twist components must be finite")
        object.__setattr__(self, "v", v)
        object.__setattr__(self, "w", w)

    @classmethod
    def from_vector(cls, xi) -> "Twist":
        xi = _as_vec(xi, 6)
        return cls(xi[:3], xi[3:])

    def vector(self) -> np.ndarray:
        return np.concatenate([self.v, self.w])

    def norm(self) -> float:
        return float(np.linalg.norm(self.vector()))


@dataclass(frozen=True)
class DistanceWeights:
    c1: float
    c2: float = 1.0 / math.pi

    def __post_init__(self):
        if not (self.c1 > 0 and self.c2 > 0):
            raise ValueError("distance weights must be positive")

    @classmethod
    def for_workspace(cls, dims) -> "DistanceWeights":
        """Scale the translation term by the workspace diagonal, rotation by pi."""
        return cls(c1=1.0 / float(np.linalg.norm(dims)), c2=1.0 / math.pi)


def compose(a: Pose, b: Pose) -> Pose:
    return Pose(a.t + a.R @ b.t, quat_normalize(quat_mul(a.q, b.q)))


def inverse(p: Pose) -> Pose:
    qi = quat_conj(p.q)
    return Pose(-(quat_to_matrix(qi) @ p.t), qi)


def relative(a: Pose, b: Pose) -> Pose:
    """Pose of ``b`` expressed in the frame of ``a`` (``a^-1 b``)."""
    return compose(inverse(a), b)


def translation_error(p: Pose, g: Pose) -> float:
    return float(np.linalg.norm(p.t - g.t))


def pose_distance(p: Pose, g: Pose, w: DistanceWeights) -> float:
    return w.c1 * translation_error(p, g) + w.c2 * rotation_angle(p.q, g.q)


def pose_errors(p: Pose, g: Pose) -> tuple[float, float]:
    """(translation error in cm, rotation error in degrees)."""
    return 100.0 * translation_error(p, g), math.degrees(rotation_angle(p.q, g.q))


def check_action(a, bounds=DEFAULT_ACTION_BOUNDS, tol: float = 1e-12) -> np.ndarray:
    a = _as_vec(a, 6)
    bounds = _as_vec(bounds, 6)
    if not np.all(np.isfinite(a)):
        raise ValueError("action must be finite")
    bad = np.abs(a) > bounds + tol
    if np.any(bad):
        raise ValueError(f"action components {np.flatnonzero(bad).tolist()} exceed bounds")
    return a


def action_pose(a) -> Pose:
    """The camera-frame displacement encoded by an action delta."""
    a = _as_vec(a, 6)
    return Pose(a[:3], euler_xyz_quat(*a[3:]))


def apply_action(p: Pose, a, bounds=DEFAULT_ACTION_BOUNDS) -> Pose:
    """Apply ``(dx, dy, dz, droll, dpitch, dyaw)`` in the current camera frame.

    Pass ``bounds=None`` to skip the bound check.
    """
    a = check_action(a, bounds) if bounds is not None else _as_vec(a, 6)
    return compose(p, action_pose(a))


def lookat_pose(position, target, roll: float = 0.0, up=WORLD_UP) -> Pose:
    """Camera at ``position`` with its optical axis through ``target``.

    Raises ValueError if the viewing direction is (nearly) parallel to ``up``.
    """
    position = _as_vec(position, 3)
    target = _as_vec(target, 3)
    up = _as_vec(up, 3)
    d = target - position
    n = np.linalg.norm(d)
    if n < 1e-12:
        raise ValueError("position and target coincide")
    z = d / n
    y = -up - np.dot(-up, z) * z
    ny = np.linalg.norm(y)
    if ny < 1e-6:
        raise ValueError("viewing direction is parallel to the up vector")
    y = y / ny
    x = np.cross(y, z)
    R = np.column_stack([x, y, z])
    base = Pose(position, matrix_to_quat(R))
    return compose(base, Pose(np.zeros(3), axis_angle_quat([0, 0, 1], roll)))


def optical_axis(p: Pose) -> np.ndarray:
    return p.R[:, 2]


# ---------------------------------------------------------------------------
# Exponential map (only what twist integration needs)
# ---------------------------------------------------------------------------

def _skew(w) -> np.ndarray:
    return np.array([[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]])


def exp_twist(xi) -> Pose:
    """SE(3) exponential of a body twist ``(v, w)`` (already multiplied by dt)."""
    xi = _as_vec(xi, 6)
    v, w = xi[:3], xi[3:]
    theta = np.linalg.norm(w)
    W = _skew(w)
    if theta < 1e-6:
        V = np.eye(3) + 0.5 * W + W @ W / 6.0
    else:
        V = (np.eye(3) + (1 - math.cos(theta)) / theta**2 * W
             + (theta - math.sin(theta)) / theta**3 * W @ W)
    return Pose(V @ v, rotvec_to_quat(w))


def integrate_twist(p: Pose, twist: Twist, dt: float) -> Pose:
    """Move the camera with a body-frame twist for ``dt`` seconds."""
    return compose(p, exp_twist(twist.vector() * dt))


def interpolate(a: Pose, b: Pose, s: float) -> Pose:
    """Straight line in translation, geodesic (slerp) in rotation."""
    return Pose((1 - s) * a.t + s * b.t, slerp(a.q, b.q, s))
