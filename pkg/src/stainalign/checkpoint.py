"""Binary checkpoint format shared by training and inference.

Layout (little-endian):

    magic "CSCK" | version u16 (=1) | tensor count u32
    per tensor: name_len u16 + UTF-8 name | ndim u8 | dims u32 each
                | float32 values
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

CKPT_MAGIC = b"CSCK"
CKPT_VERSION = 1

__all__ = ["CheckpointError", "save_checkpoint", "load_checkpoint"]


class CheckpointError(ValueError):
    """Raised for malformed checkpoint files or missing tensors."""


def save_checkpoint(path: Path, tensors: dict[str, np.ndarray]) -> int:
    """Write named tensors in insertion order; returns the byte count."""
    parts = [CKPT_MAGIC, struct.pack("<HI", CKPT_VERSION, len(tensors))]
    for name, value in tensors.items():
        arr = np.ascontiguousarray(value, dtype=np.float32)
        if not np.all(np.isfinite(arr)):
            raise CheckpointError(f"tensor {name} contains non-finite values")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.astype("<f4").tobytes())
    blob = b"".join(parts)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(blob)
    return len(blob)


def load_checkpoint(path: Path) -> dict[str, np.ndarray]:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    blob = path.read_bytes()
    view = memoryview(blob)
    off = 0

    def take(count: int, what: str):
        nonlocal off
        if off + count > len(view):
            raise CheckpointError(f"truncated checkpoint while reading {what}")
        chunk = view[off : off + count]
        off += count
        return chunk

    if bytes(take(4, "magic")) != CKPT_MAGIC:
        raise CheckpointError(f"bad checkpoint magic in {path}")
    version, count = struct.unpack("<HI", take(6, "header"))
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")

    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2, "name length"))
        name = bytes(take(name_len, "name")).decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1, "ndim"))
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim, "dims"))
        size = int(np.prod(dims, dtype=np.int64)) if ndim else 1
        values = np.frombuffer(take(4 * size, f"values of {name}"), dtype="<f4")
        tensors[name] = values.reshape(dims).copy()
    if off != len(view):
        raise CheckpointError(f"trailing bytes in checkpoint {path}")
    return tensors
