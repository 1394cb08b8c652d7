"""Single-file named-tensor archive.

Layout::

    b"VSLSCKPT" | uint64 LE manifest length | manifest (UTF-8 JSON) | blobs

The manifest lists every tensor's name, shape, dtype (always ``<f4``),
byte offset (relative to the start of the blob section) and size, plus the
format version, a config hash and free-form JSON metadata. Serialization is
canonical, so ``save(load(save(x)))`` reproduces the same bytes.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"VSLSCKPT"
FORMAT_VERSION = 1
DTYPE = "<f4"


class CheckpointError(ValueError):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class ShapeMismatchError(CheckpointError):
    pass


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)
    config_hash: str = ""
    step: int = 0
    version: int = FORMAT_VERSION

    def group(self, prefix: str) -> dict[str, np.ndarray]:
        p = prefix.rstrip("/") + "/"
        return {k[len(p):]: v for k, v in self.tensors.items() if k.startswith(p)}

    def digest(self, prefix: str = "") -> str:
        """SHA-256 over the named tensors under ``prefix`` (all if empty)."""
        h = hashlib.sha256()
        for name in sorted(self.tensors):
            if name.startswith(prefix):
                h.update(name.encode())
                h.update(np.array(self.tensors[name], dtype=DTYPE, order="C").tobytes())
        return h.hexdigest()


def to_bytes(ckpt: Checkpoint) -> bytes:
    entries, blobs, offset = [], [], 0
    for name in sorted(ckpt.tensors):
        arr = np.array(ckpt.tensors[name], dtype=DTYPE, order="C")  # keeps 0-d shapes
        if not np.all(np.isfinite(arr)):
            raise CheckpointError(f"tensor {name!r} has non-finite values")
        raw = arr.tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": DTYPE,
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    manifest = {"format_version": ckpt.version, "config_hash": ckpt.config_hash,
                "step": int(ckpt.step), "tensors": entries, "meta": ckpt.meta,
                "blob_bytes": offset}
    head = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(head)) + head + b"".join(blobs)


def from_bytes(data: bytes) -> Checkpoint:
    if len(data) < len(MAGIC) + 8 or data[:len(MAGIC)] != MAGIC:
        raise CorruptCheckpointError("not a checkpoint archive (bad magic)")
    (n,) = struct.unpack("<Q", data[len(MAGIC):len(MAGIC) + 8])
    start = len(MAGIC) + 8
    if start + n > len(data):
        raise CorruptCheckpointError("truncated manifest")
    try:
        manifest = json.loads(data[start:start + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CorruptCheckpointError(f"unreadable manifest: {e}") from e
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"format version {version} != {FORMAT_VERSION}")
    base = start + n
    if len(data) != base + manifest["blob_bytes"]:
        raise CorruptCheckpointError(
            f"blob section is {len(data) - base} bytes, manifest says {manifest['blob_bytes']}")
    tensors = {}
    for e in manifest["tensors"]:
        if e["dtype"] != DTYPE:
            raise CorruptCheckpointError(f"unsupported dtype {e['dtype']}")
        lo, hi = base + e["offset"], base + e["offset"] + e["nbytes"]
        if hi > len(data) or e["nbytes"] != 4 * int(np.prod(e["shape"], dtype=np.int64)):
            raise CorruptCheckpointError(f"tensor {e['name']!r} is out of bounds")
        tensors[e["name"]] = np.frombuffer(data[lo:hi], dtype=DTYPE).reshape(e["shape"]).copy()
    return Checkpoint(tensors, manifest.get("meta", {}), manifest.get("config_hash", ""),
                      manifest.get("step", 0), version)


def atomic_write(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save(path, ckpt: Checkpoint) -> None:
    atomic_write(path, to_bytes(ckpt))


def load(path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# torch helpers
# ---------------------------------------------------------------------------

def module_tensors(prefix: str, module) -> dict[str, np.ndarray]:
    return {f"{prefix}/{k}": v.detach().cpu().numpy().astype(np.float32)
            for k, v in module.state_dict().items()}


def load_module(module, tensors: dict[str, np.ndarray], prefix: str) -> None:
    import torch

    own = module.state_dict()
    got = {k[len(prefix) + 1:]: v for k, v in tensors.items() if k.startswith(prefix + "/")}
    missing = sorted(set(own) - set(got))
    extra = sorted(set(got) - set(own))
    if missing or extra:
        raise ShapeMismatchError(f"{prefix}: missing {missing[:3]}, unexpected {extra[:3]}")
    for k, v in own.items():
        if tuple(v.shape) != tuple(got[k].shape):
            raise ShapeMismatchError(
                f"{prefix}/{k}: checkpoint shape {tuple(got[k].shape)} != model {tuple(v.shape)}")
    module.load_state_dict({k: torch.from_numpy(np.array(got[k])).to(own[k].dtype) for k in own})


def optimizer_tensors(prefix: str, opt) -> dict[str, np.ndarray]:
    """Adam-style state: one entry per (param index, state key)."""
    out = {}
    sd = opt.state_dict()
    for idx, st in sd["state"].items():
        for key, val in st.items():
            arr = val.detach().cpu().numpy() if hasattr(val, "detach") else np.asarray(val)
            out[f"{prefix}/{idx}/{key}"] = arr.astype(np.float32)
    return out


def load_optimizer(opt, tensors: dict[str, np.ndarray], prefix: str) -> None:
    import torch

    sd = opt.state_dict()
    n_params = sum(len(g["params"]) for g in sd["param_groups"])
    state: dict[int, dict] = {}
    for name, arr in tensors.items():
        if not name.startswith(prefix + "/"):
            continue
        idx, key = name[len(prefix) + 1:].split("/", 1)
        idx = int(idx)
        if idx >= n_params:
            raise ShapeMismatchError(f"{name}: optimizer has only {n_params} parameters")
        state.setdefault(idx, {})[key] = torch.from_numpy(np.array(arr))
    params = [p for g in opt.param_groups for p in g["params"]]
    for idx, st in state.items():
        for key, val in st.items():
            if key != "step" and tuple(val.shape) != tuple(params[idx].shape):
                raise ShapeMismatchError(f"{prefix}/{idx}/{key}: shape mismatch")
            st[key] = val.to(params[idx].dtype) if key != "step" else val.float()
    sd["state"] = state
    opt.load_state_dict(sd)
