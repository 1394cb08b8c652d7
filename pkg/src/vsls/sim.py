"""Eye-in-hand camera over a textured plane.

Images are float64 ``(H, W)`` arrays in [0, 1], row-major, row = v, column = u.
The plane is the local ``z = 0`` plane of ``PlanarScene.plane_pose``; its
textured side faces local +z.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import se3
from .se3 import Pose

BACKGROUND = 0.5
HOME_HEIGHT = 0.6
DEFAULT_WORKSPACE_DIMS = (0.75, 0.75, 0.6)


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float = 50.0
    fy: float = 50.0
    cx: float = 31.5
    cy: float = 31.5
    width: int = 64
    height: int = 64

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside the image")

    @classmethod
    def square(cls, size: int, fov_scale: float = 50.0 / 64.0) -> "CameraIntrinsics":
        """Same field of view as the 64x64 default at another resolution."""
        f = fov_scale * size
        c = (size - 1) / 2.0
        return cls(f, f, c, c, size, size)

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])


@dataclass(eq=False)
class PlanarScene:
    texture: np.ndarray
    plane_pose: Pose = field(default_factory=Pose.identity)
    extent: tuple[float, float] = (2.4, 2.4)
    background: float = BACKGROUND
    scene_id: str = ""

    def __post_init__(self):
        tex = np.asarray(self.texture, dtype=np.float64)
        if tex.ndim != 2 or tex.size == 0:
            raise ValueError("texture must be a non-empty 2-D array")
        if np.any(tex < 0) or np.any(tex > 1):
            raise ValueError("texture values must lie in [0, 1]")
        if not (self.extent[0] > 0 and self.extent[1] > 0):
            raise ValueError("plane extent must be positive")
        self.texture = tex

    def perturbed(self, rng: np.random.Generator, trans: float, rot: float) -> "PlanarScene":
        """Copy with the plane moved by up to ``trans`` m / ``rot`` rad per axis."""
        d = np.concatenate([rng.uniform(-trans, trans, 3), rng.uniform(-rot, rot, 3)])
        return replace(self, plane_pose=se3.compose(self.plane_pose, se3.action_pose(d)))


@dataclass(frozen=True)
class Workspace:
    center: tuple[float, float, float] = (0.0, 0.0, HOME_HEIGHT)
    dims: tuple[float, float, float] = DEFAULT_WORKSPACE_DIMS
    min_height: float = 0.1

    @property
    def lo(self) -> np.ndarray:
        return np.asarray(self.center) - 0.5 * np.asarray(self.dims)

    @property
    def hi(self) -> np.ndarray:
        return np.asarray(self.center) + 0.5 * np.asarray(self.dims)

    def clamp(self, t) -> np.ndarray:
        t = np.clip(np.asarray(t, dtype=np.float64), self.lo, self.hi)
        t[2] = max(t[2], self.min_height)
        return t


def home_pose(height: float = HOME_HEIGHT) -> Pose:
    return se3.lookat_pose([0.0, 0.0, height], [0.0, 0.0, 0.0], 0.0)


def is_feasible(pose: Pose, workspace: Workspace, tol: float = 1e-12) -> bool:
    t = pose.t
    inside = bool(np.all(t >= workspace.lo - tol) and np.all(t <= workspace.hi + tol))
    return inside and t[2] >= workspace.min_height - tol


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------

def _camera_rays(k: CameraIntrinsics) -> np.ndarray:
    v, u = np.mgrid[0:k.height, 0:k.width].astype(np.float64)
    return np.stack([(u - k.cx) / k.fx, (v - k.cy) / k.fy, np.ones_like(u)], axis=-1)


def _intersect(scene: PlanarScene, k: CameraIntrinsics, pose: Pose, rays=None):
    """Plane coordinates and optical-axis depth for each ray (NaN on miss)."""
    Rp = scene.plane_pose.R
    origin = Rp.T @ (pose.t - scene.plane_pose.t)
    if origin[2] <= 0:
        raise ValueError("camera is behind or on the scene plane")
    if rays is None:
        rays = _camera_rays(k)
    d = rays @ (Rp.T @ pose.R).T
    with np.errstate(divide="ignore", invalid="ignore"):
        lam = np.where(d[..., 2] < -1e-12, -origin[2] / d[..., 2], np.nan)  # grazing rays miss
    xy = origin[:2] + lam[..., None] * d[..., :2]
    return xy, lam


def _plane_to_texel(scene: PlanarScene, xy: np.ndarray) -> np.ndarray:
    """Plane metric coordinates -> (col, row) texel coordinates (pixel centres)."""
    h_t, w_t = scene.texture.shape
    w, h = scene.extent
    col = (xy[..., 0] / w + 0.5) * w_t - 0.5
    row = (0.5 - xy[..., 1] / h) * h_t - 0.5
    return np.stack([col, row], axis=-1)


def bilinear(tex: np.ndarray, col: np.ndarray, row: np.ndarray) -> np.ndarray:
    """Bilinear sample with clamp-to-edge."""
    h_t, w_t = tex.shape
    col = np.clip(col, 0.0, w_t - 1.0)
    row = np.clip(row, 0.0, h_t - 1.0)
    c0 = np.minimum(np.floor(col).astype(np.int64), w_t - 2 if w_t > 1 else 0)
    r0 = np.minimum(np.floor(row).astype(np.int64), h_t - 2 if h_t > 1 else 0)
    c1 = np.minimum(c0 + 1, w_t - 1)
    r1 = np.minimum(r0 + 1, h_t - 1)
    fc = col - c0
    fr = row - r0
    top = tex[r0, c0] * (1 - fc) + tex[r0, c1] * fc
    bot = tex[r1, c0] * (1 - fc) + tex[r1, c1] * fc
    return top * (1 - fr) + bot * fr


def in_extent_mask(scene: PlanarScene, k: CameraIntrinsics, pose: Pose) -> np.ndarray:
    xy, lam = _intersect(scene, k, pose)
    w, h = scene.extent
    with np.errstate(invalid="ignore"):
        return (np.isfinite(lam) & (np.abs(xy[..., 0]) <= w / 2)
                & (np.abs(xy[..., 1]) <= h / 2))


def render(scene: PlanarScene, k: CameraIntrinsics, pose: Pose) -> np.ndarray:
    xy, lam = _intersect(scene, k, pose)
    w, h = scene.extent
    with np.errstate(invalid="ignore"):
        hit = (np.isfinite(lam) & (np.abs(xy[..., 0]) <= w / 2)
               & (np.abs(xy[..., 1]) <= h / 2))
    img = np.full((k.height, k.width), float(scene.background))
    if np.any(hit):
        tc = _plane_to_texel(scene, xy[hit])
        img[hit] = bilinear(scene.texture, tc[:, 0], tc[:, 1])
    return img


def depth_map(scene: PlanarScene, k: CameraIntrinsics, pose: Pose) -> np.ndarray:
    """Optical-axis depth per pixel; NaN where the ray misses the plane."""
    _, lam = _intersect(scene, k, pose)
    return lam


def pixel_depth(scene: PlanarScene, k: CameraIntrinsics, pose: Pose, pixel) -> float | None:
    u, v = pixel
    ray = np.array([[(u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0]])
    _, lam = _intersect(scene, k, pose, rays=ray)
    z = float(lam[0])
    return None if not np.isfinite(z) else z


def center_visible(scene: PlanarScene, k: CameraIntrinsics, pose: Pose) -> bool:
    """True if the optical axis hits the textured extent."""
    ray = np.array([[0.0, 0.0, 1.0]])
    try:
        xy, lam = _intersect(scene, k, pose, rays=ray)
    except ValueError:
        return False
    w, h = scene.extent
    return bool(np.isfinite(lam[0]) and abs(xy[0, 0]) <= w / 2 and abs(xy[0, 1]) <= h / 2)


# ---------------------------------------------------------------------------
# Augmentation and domain shift
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AugmentConfig:
    cutout_count: int = 0
    cutout_max_frac: float = 0.1
    noise_sigma: float = 0.0
    brightness: tuple[float, float] = (0.0, 0.0)
    contrast: tuple[float, float] = (1.0, 1.0)
    posterize_bits: int | None = None
    grayscale_prob: float = 0.0  # images are already grayscale; kept for RGB pipelines
    prob: float = 1.0  # probability that augmentation is applied at all

    def __post_init__(self):
        if not (0 < self.cutout_max_frac < 1):
            raise ValueError("cutout_max_frac must lie in (0, 1)")
        if not (0 <= self.grayscale_prob <= 1 and 0 <= self.prob <= 1):
            raise ValueError("probabilities must lie in [0, 1]")
        if self.posterize_bits is not None and self.posterize_bits < 1:
            raise ValueError("posterize_bits must be >= 1")
        if self.cutout_count < 0 or self.noise_sigma < 0:
            raise ValueError("cutout_count and noise_sigma must be non-negative")


def posterize(img: np.ndarray, bits: int) -> np.ndarray:
    levels = 2 ** bits
    return np.minimum(np.floor(img * levels), levels - 1) / (levels - 1)


def augment(img: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """brightness/contrast -> noise -> posterize -> cutout, clamped to [0, 1]."""
    out = np.array(img, dtype=np.float64, copy=True)
    if cfg.prob < 1.0 and rng.uniform() >= cfg.prob:
        return out
    c = rng.uniform(*cfg.contrast) if cfg.contrast[0] != cfg.contrast[1] else cfg.contrast[0]
    b = rng.uniform(*cfg.brightness) if cfg.brightness[0] != cfg.brightness[1] else cfg.brightness[0]
    if c != 1.0 or b != 0.0:
        out = np.clip((out - 0.5) * c + 0.5 + b, 0.0, 1.0)
    if cfg.noise_sigma > 0:
        out = np.clip(out + rng.normal(0.0, cfg.noise_sigma, out.shape), 0.0, 1.0)
    if cfg.posterize_bits is not None:
        out = posterize(out, cfg.posterize_bits)
    h, w = out.shape
    side = math.sqrt(cfg.cutout_max_frac)
    max_h, max_w = max(1, int(side * h)), max(1, int(side * w))
    for _ in range(cfg.cutout_count):
        ch = int(rng.integers(1, max_h + 1))
        cw = int(rng.integers(1, max_w + 1))
        r0 = int(rng.integers(0, h - ch + 1))
        c0 = int(rng.integers(0, w - cw + 1))
        out[r0:r0 + ch, c0:c0 + cw] = 0.0
    return out


@dataclass(frozen=True)
class DomainShift:
    """A fixed observation corruption standing in for an unseen real domain."""

    name: str = "lab"
    noise_sigma: float = 0.04
    brightness_offset: float = 0.12
    contrast: float = 0.85
    # occluder rectangle as fractions of the image: (row0, col0, height, width)
    occluder: tuple[float, float, float, float] = (0.55, 0.05, 0.35, 0.3)
    occluder_value: float = 0.0

    def apply(self, img: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        out = (np.asarray(img, dtype=np.float64) - 0.5) * self.contrast + 0.5 + self.brightness_offset
        if self.noise_sigma > 0:
            out = out + rng.normal(0.0, self.noise_sigma, out.shape)
        h, w = out.shape
        r0, c0, oh, ow = self.occluder
        out[int(r0 * h):int((r0 + oh) * h), int(c0 * w):int((c0 + ow) * w)] = self.occluder_value
        return np.clip(out, 0.0, 1.0)


SHIFT_PRESETS = {
    "lab": DomainShift(),
    "harsh": DomainShift(name="harsh", noise_sigma=0.07, brightness_offset=0.2,
                         contrast=0.7, occluder=(0.4, 0.0, 0.45, 0.4)),
}


def shift_preset(name: str) -> DomainShift:
    try:
        return SHIFT_PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown domain-shift preset {name!r}; "
                         f"choose from {sorted(SHIFT_PRESETS)}") from None


# ---------------------------------------------------------------------------
# Stepping
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class SimState:
    camera_pose: Pose
    scene: PlanarScene
    intrinsics: CameraIntrinsics = field(default_factory=CameraIntrinsics)
    workspace: Workspace = field(default_factory=Workspace)
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))
    step_count: int = 0
    bounds: np.ndarray = field(default_factory=lambda: se3.DEFAULT_ACTION_BOUNDS.copy())
    augment: AugmentConfig | None = None
    shift: DomainShift | None = None
    substeps: int = 3
    clamped: bool = False
    path: tuple[Pose, ...] = ()

    def __post_init__(self):
        if self.camera_pose.t[2] <= 0:
            raise ValueError("camera must start above the scene plane")

    def render(self) -> np.ndarray:
        """Noise-free render at the current pose."""
        return render(self.scene, self.intrinsics, self.camera_pose)

    def observe(self) -> np.ndarray:
        """Render plus the configured augmentation and domain shift."""
        img = self.render()
        if self.augment is not None:
            img = augment(img, self.augment, self.rng)
        if self.shift is not None:
            img = self.shift.apply(img, self.rng)
        return img

    def depths(self) -> np.ndarray:
        return depth_map(self.scene, self.intrinsics, self.camera_pose)


def step(state: SimState, a) -> tuple[SimState, np.ndarray]:
    """Move toward ``apply_action(pose, a)`` in ``state.substeps`` equal sub-steps.

    An infeasible target is clamped to the workspace and ``clamped`` is set on
    the returned state.
    """
    start = state.camera_pose
    target = se3.apply_action(start, a, state.bounds)
    clamped = False
    if not is_feasible(target, state.workspace):
        target = Pose(state.workspace.clamp(target.t), target.q)
        clamped = True
    n = state.substeps
    path = tuple(se3.interpolate(start, target, (i + 1) / n) for i in range(n))
    new = replace(state, camera_pose=path[-1], step_count=state.step_count + 1,
                  clamped=clamped, path=path)
    return new, new.observe()
