"""Named-tensor checkpoint container.

Binary layout (little-endian): magic b"NTC1", u32 tensor count, then per
tensor: u16 name length, utf-8 name, u8 ndim, u32 dims..., f64 data.
A JSON manifest with names/shapes is written alongside as <path>.json.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"NTC1"


class CheckpointShapeMismatch(ValueError):
    pass


def save_checkpoint(path, tensors, meta=None):
    """tensors: dict name -> ndarray (or Tensor)."""
    path = Path(path)
    items = []
    for name in sorted(tensors):
        arr = tensors[name]
        data = np.asarray(getattr(arr, "data", arr), dtype="<f8")
        items.append((name, data))
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(items)))
        for name, data in items:
            nb = name.encode("utf-8")
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<B", data.ndim))
            for d in data.shape:
                f.write(struct.pack("<I", d))
            f.write(data.tobytes())
    manifest = {
        "tensors": {name: list(data.shape) for name, data in items},
        "meta": meta or {},
    }
    with open(str(path) + ".json", "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)


def load_checkpoint(path):
    """Returns dict name -> float64 ndarray."""
    out = {}
    with open(path, "rb") as f:
        if f.read(4) != MAGIC:
            raise ValueError("not a checkpoint file")
        (count,) = struct.unpack("<I", f.read(4))
        for _ in range(count):
            (nlen,) = struct.unpack("<H", f.read(2))
            name = f.read(nlen).decode("utf-8")
            (ndim,) = struct.unpack("<B", f.read(1))
            shape = tuple(struct.unpack("<I", f.read(4))[0] for _ in range(ndim))
            n = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(f.read(8 * n), dtype="<f8").reshape(shape).copy()
            out[name] = data
    return out


def load_into(params, state, prefix="", strict=False):
    """Copy matching-named tensors from `state` into parameter list.

    Parameters absent from the checkpoint keep their current values.
    Returns the list of names that were loaded.
    """
    loaded = []
    by_name = {p.name: p for p in params if p.name}
    for name, arr in state.items():
        key = name[len(prefix):] if prefix and name.startswith(prefix) else name
        p = by_name.get(key)
        if p is None:
            continue
        if p.data.shape != arr.shape:
            raise CheckpointShapeMismatch(f"{name}: {arr.shape} vs {p.data.shape}")
        p.data[...] = arr
        loaded.append(key)
    if strict:
        missing = set(by_name) - set(loaded)
        if missing:
            raise CheckpointShapeMismatch(f"missing tensors: {sorted(missing)}")
    return loaded


def dump_params(params):
    """Parameter list -> dict name -> ndarray copy."""
    out = {}
    for p in params:
        if not p.name:
            raise ValueError("unnamed parameter cannot be checkpointed")
        if p.name in out:
            raise ValueError(f"duplicate parameter name {p.name}")
        out[p.name] = p.data.copy()
    return out
