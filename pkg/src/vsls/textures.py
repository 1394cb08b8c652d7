"""Texture loading, procedural texture generation and scene manifests."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image as PILImage
from scipy import ndimage

from .sim import PlanarScene


def load_texture(path) -> np.ndarray:
    """PNG -> grayscale float image in [0, 1] (RGB converted by luma)."""
    try:
        with PILImage.open(path) as im:
            arr = np.asarray(im.convert("L"), dtype=np.float64)
    except (OSError, ValueError) as e:
        raise ValueError(f"unreadable image {path}: {e}") from e
    return arr / 255.0


def save_texture(path, tex: np.ndarray) -> None:
    arr = np.clip(np.round(np.asarray(tex) * 255.0), 0, 255).astype(np.uint8)
    PILImage.fromarray(arr, mode="L").save(path)


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def generate_texture(rng: np.random.Generator, size: int = 512,
                     scales=(3.0, 8.0, 20.0), weights=(0.35, 0.4, 0.25)) -> np.ndarray:
    """Band-limited random texture: a weighted sum of blurred noise fields.

    ``scales`` are Gaussian blur sigmas in texels. The result is contrast
    stretched to [0.05, 0.95].
    """
    acc = np.zeros((size, size))
    for s, w in zip(scales, weights):
        layer = ndimage.gaussian_filter(rng.standard_normal((size, size)), s, mode="wrap")
        acc += w * layer / (layer.std() + 1e-12)
    lo, hi = np.percentile(acc, [1, 99])
    return np.clip(0.05 + 0.9 * (acc - lo) / (hi - lo), 0.0, 1.0)


def write_texture_set(out_dir, n: int, seed: int = 0, size: int = 512) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    paths = []
    for i in range(n):
        p = out / f"tex_{i:03d}.png"
        save_texture(p, generate_texture(rng, size))
        paths.append(p)
    return paths


@dataclass
class SceneEntry:
    scene_id: str
    path: str
    sha256: str
    extent: tuple[float, float] = (2.4, 2.4)
    split: str | None = None

    def load(self) -> PlanarScene:
        return PlanarScene(load_texture(self.path), extent=tuple(self.extent),
                           scene_id=self.scene_id)


def scan_directory(directory) -> list[SceneEntry]:
    """One scene per PNG; an optional ``manifest.json`` overrides extents/splits.

    manifest format: ``{"scenes": [{"file": "a.png", "extent": [w, h],
    "split": "train"|"heldout"}]}``
    """
    d = Path(directory)
    if not d.is_dir():
        raise ValueError(f"not a directory: {d}")
    overrides = {}
    manifest = d / "manifest.json"
    if manifest.exists():
        for rec in json.loads(manifest.read_text())["scenes"]:
            overrides[rec["file"]] = rec
    entries = []
    for p in sorted(d.glob("*.png")):
        rec = overrides.get(p.name, {})
        load_texture(p)  # fail early on unreadable files
        entries.append(SceneEntry(scene_id=p.stem, path=str(p), sha256=file_hash(p),
                                  extent=tuple(rec.get("extent", (2.4, 2.4))),
                                  split=rec.get("split")))
    if not entries:
        raise ValueError(f"no PNG textures found in {d}")
    return entries
