"""Binary tensor files: magic ``AVTL``, u32 rank, u32 extents, f64 payload.

Everything little-endian, payload in row-major order. Used for checkpoints,
cached features, and cached teacher outputs.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import InputError

MAGIC = b"AVTL"


def save_tensor(path: str | Path, arr: np.ndarray) -> None:
    arr = np.asarray(arr, dtype=np.float64)  # tobytes() below emits C order
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.astype("<f8").tobytes())


def load_tensor(path: str | Path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise InputError(f"{path}: bad magic {magic!r}")
        (rank,) = struct.unpack("<I", fh.read(4))
        if rank > 8:
            raise InputError(f"{path}: implausible rank {rank}")
        shape = struct.unpack(f"<{rank}I", fh.read(4 * rank))
        count = int(np.prod(shape)) if shape else 1
        payload = fh.read(8 * count)
        if len(payload) != 8 * count:
            raise InputError(f"{path}: truncated payload")
        extra = fh.read(1)
        if extra:
            raise InputError(f"{path}: trailing bytes")
    return np.frombuffer(payload, dtype="<f8").reshape(shape).copy()
