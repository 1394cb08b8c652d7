"""Photometric direct visual servoing.

The feature vector is the raw image. Each in-view, non-border pixel
contributes one row ``-grad(I) . L_x`` to the interaction matrix, where
``L_x`` is the 2x6 interaction matrix of a point at normalized coordinates
``(x, y)`` and depth ``Z``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import se3
from .se3 import Pose, Twist
from .sim import CameraIntrinsics, SimState


class DvsError(RuntimeError):
    pass


@dataclass(frozen=True)
class DvsConfig:
    gain: float = 0.4
    max_iters: int = 600
    error_eps: float = 1e-9
    velocity_eps: float = 1e-6
    dt: float = 0.05
    damping: float = 1e-3

    def __post_init__(self):
        if not (0 < self.gain <= 2):
            raise ValueError("gain must lie in (0, 2]")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.damping < 0 or self.dt <= 0:
            raise ValueError("damping must be >= 0 and dt > 0")


@dataclass
class DvsResult:
    converged: bool
    iters: int
    final_pose: Pose
    error_trace: list[float] = field(default_factory=list)
    pose_error_trace: list[tuple[float, float]] = field(default_factory=list)
    reason: str = ""

    def to_dict(self) -> dict:
        return {
            "converged": self.converged,
            "iters": self.iters,
            "final_pose": self.final_pose.to_list(),
            "error_trace": [float(e) for e in self.error_trace],
            "pose_error_trace": [[float(a), float(b)] for a, b in self.pose_error_trace],
            "reason": self.reason,
        }


def photometric_error(img: np.ndarray, goal: np.ndarray) -> tuple[np.ndarray, float]:
    img = np.asarray(img, dtype=np.float64)
    goal = np.asarray(goal, dtype=np.float64)
    if img.shape != goal.shape:
        raise ValueError(f"image shapes differ: {img.shape} vs {goal.shape}")
    residual = (img - goal).reshape(-1)
    return residual, float(np.mean(residual ** 2))


def image_gradients(img: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Central differences in pixel units; border entries are zero."""
    gu = np.zeros_like(img)
    gv = np.zeros_like(img)
    gu[:, 1:-1] = 0.5 * (img[:, 2:] - img[:, :-2])
    gv[1:-1, :] = 0.5 * (img[2:, :] - img[:-2, :])
    return gu, gv


def usable_mask(depths: np.ndarray) -> np.ndarray:
    mask = np.isfinite(depths) & (depths > 0)
    mask[0, :] = mask[-1, :] = False
    mask[:, 0] = mask[:, -1] = False
    return mask


def interaction_matrix(img: np.ndarray, depths: np.ndarray, k: CameraIntrinsics,
                       mask: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Photometric interaction matrix rows for the usable pixels.

    Returns ``(L, mask)``: ``L`` is ``(mask.sum(), 6)`` in row-major pixel
    order over ``mask``.
    """
    img = np.asarray(img, dtype=np.float64)
    if mask is None:
        mask = usable_mask(depths)
    if not np.any(mask):
        raise DvsError("no pixel has a valid depth")
    gu, gv = image_gradients(img)
    v, u = np.nonzero(mask)
    x = (u - k.cx) / k.fx
    y = (v - k.cy) / k.fy
    Z = depths[mask]
    Ix = gu[mask] * k.fx
    Iy = gv[mask] * k.fy
    inv_z = 1.0 / Z
    L = np.empty((x.size, 6))
    L[:, 0] = Ix * inv_z
    L[:, 1] = Iy * inv_z
    L[:, 2] = -(x * Ix + y * Iy) * inv_z
    L[:, 3] = -x * y * Ix - (1 + y * y) * Iy
    L[:, 4] = (1 + x * x) * Ix + x * y * Iy
    L[:, 5] = -y * Ix + x * Iy
    return L, mask


def _damped_solve(L: np.ndarray, e: np.ndarray, mu: float) -> np.ndarray:
    H = L.T @ L
    A = H + mu * np.diag(np.diag(H))
    if not np.all(np.isfinite(A)) or np.linalg.cond(A) > 1e12:
        raise np.linalg.LinAlgError("normal matrix is singular")
    return np.linalg.solve(A, L.T @ e)


def control_step(img, goal, depths, k: CameraIntrinsics, cfg: DvsConfig) -> Twist:
    """One damped Gauss-Newton velocity command in the camera frame."""
    residual, _ = photometric_error(img, goal)
    L, mask = interaction_matrix(img, depths, k)
    e = residual[mask.reshape(-1)]
    if not np.any(e):
        return Twist(np.zeros(3), np.zeros(3))
    mu = cfg.damping
    try:
        step = _damped_solve(L, e, mu)
    except np.linalg.LinAlgError:
        try:
            step = _damped_solve(L, e, max(10.0 * mu, 1e-6))
        except np.linalg.LinAlgError as exc:
            raise DvsError("interaction matrix is degenerate (texture-less view?)") from exc
    return Twist.from_vector(-cfg.gain * step)


def servo(sim: SimState, goal_img: np.ndarray, cfg: DvsConfig = DvsConfig(),
          goal_pose: Pose | None = None) -> DvsResult:
    """Iterate the control law until the photometric error drops below ``error_eps``.

    Stops unconverged on a stalled twist, ``max_iters``, or when the camera
    leaves the valid viewing region. ``goal_pose`` only feeds the pose-error
    trace.
    """
    pose = sim.camera_pose
    state = sim
    errors: list[float] = []
    pose_errors: list[tuple[float, float]] = []
    reason = "max_iters"
    converged = False
    for _ in range(cfg.max_iters):
        try:
            img = state.observe()
            depths = state.depths()
        except ValueError:
            reason = "left_view"
            break
        _, mse = photometric_error(img, goal_img)
        errors.append(mse)
        if goal_pose is not None:
            pose_errors.append(se3.pose_errors(pose, goal_pose))
        if mse < cfg.error_eps:
            converged = True
            reason = "error_eps"
            break
        try:
            twist = control_step(img, goal_img, depths, state.intrinsics, cfg)
        except DvsError:
            reason = "degenerate"
            break
        if twist.norm() < cfg.velocity_eps:
            reason = "stalled"
            break
        pose = se3.integrate_twist(pose, twist, cfg.dt)
        if not math.isfinite(float(np.sum(pose.t))) or pose.t[2] <= 0:
            reason = "left_view"
            break
        state = replace(state, camera_pose=pose)
    return DvsResult(converged=converged, iters=len(errors), final_pose=pose,
                     error_trace=errors, pose_error_trace=pose_errors, reason=reason)
