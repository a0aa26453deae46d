"""Named-tensor checkpoint container.

Layout (all integers little-endian)::

    b"ZSSL0001"                     magic
    u64  tensor count
    per tensor:
        u32  name length in bytes, then the UTF-8 name
        u32  rank
        i64 x rank   extents
        f64 x prod(extents)   values, row-major
"""
from __future__ import annotations

import os
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"ZSSL0001"


class CheckpointError(ValueError):
    pass


def save(path: str | os.PathLike, tensors: Mapping[str, np.ndarray]) -> None:
    """Write atomically: data goes to a sibling temp file which is then renamed."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(tensors)))
        for name, value in tensors.items():
            arr = np.array(value, dtype="<f8", order="C")
            raw = name.encode("utf-8")
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)
            f.write(struct.pack("<I", arr.ndim))
            f.write(np.asarray(arr.shape, dtype="<i8").tobytes())
            f.write(arr.tobytes())
    os.replace(tmp, path)


def load(path: str | os.PathLike) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        buf = f.read()
    if buf[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad magic header {buf[:8]!r}")
    pos = 8
    (count,) = struct.unpack_from("<Q", buf, pos)
    pos += 8
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos:pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            shape = tuple(int(s) for s in np.frombuffer(buf, dtype="<i8", count=rank, offset=pos))
            pos += 8 * rank
            size = int(np.prod(shape)) if rank else 1
            data = np.frombuffer(buf, dtype="<f8", count=size, offset=pos).astype(np.float64)
            pos += 8 * size
            out[name] = data.reshape(shape)
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"{path}: truncated or corrupt checkpoint") from exc
    if pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - pos} trailing bytes")
    return out
