"""TDCK binary checkpoints.

Layout (little-endian): b"TDCK", version u32, count u32, then per tensor
name-length u32, UTF-8 name, rank u32, dims u32 x rank, float64 values.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"TDCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


def dumps(tensors: Mapping[str, np.ndarray]) -> bytes:
    out = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw)))
        out.append(raw)
        out.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        out.append(arr.tobytes())
    return b"".join(out)


def loads(buf: bytes) -> dict[str, np.ndarray]:
    if buf[:4] != MAGIC:
        raise CheckpointError("not a TDCK checkpoint (bad magic)")
    pos = 4

    def take(fmt: str):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(buf):
            raise CheckpointError("truncated checkpoint")
        vals = struct.unpack_from(fmt, buf, pos)
        pos += size
        return vals

    version, count = take("<II")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (n,) = take("<I")
        if pos + n > len(buf):
            raise CheckpointError("truncated checkpoint")
        name = buf[pos:pos + n].decode("utf-8")
        pos += n
        (rank,) = take("<I")
        dims = take(f"<{rank}I") if rank else ()
        numel = int(np.prod(dims)) if rank else 1
        if pos + 8 * numel > len(buf):
            raise CheckpointError("truncated checkpoint")
        arr = np.frombuffer(buf, dtype="<f8", count=numel, offset=pos).astype(np.float64)
        pos += 8 * numel
        tensors[name] = arr.reshape(dims)
    if pos != len(buf):
        raise CheckpointError("trailing bytes after last tensor")
    return tensors


def save_checkpoint(path: str | Path, tensors: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(tensors))


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())
