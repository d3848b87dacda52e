"""Binary tensor container used for checkpoints.

Layout (little-endian)::

    magic  b"IMFPP\\0"
    u32    format version
    u32    tensor count
    repeat:
        u32   name length, name bytes (UTF-8)
        u32   rank, rank x u64 dims
        f64   payload (row-major)
"""

from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

MAGIC = b"IMFPP\0"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def dumps_tensors(tensors: dict[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", FORMAT_VERSION, len(tensors)))
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8", order="C")
        nb = name.encode("utf-8")
        buf.write(struct.pack("<I", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(arr.tobytes())
    return buf.getvalue()


def loads_tensors(data: bytes) -> dict[str, np.ndarray]:
    view = memoryview(data)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError("truncated checkpoint")
        out = view[pos:pos + n]
        pos += n
        return out

    if bytes(take(len(MAGIC))) != MAGIC:
        raise CheckpointError("bad magic: not an IMFPP checkpoint")
    version, count = struct.unpack("<II", take(8))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {FORMAT_VERSION})")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = bytes(take(nlen)).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}Q", take(8 * rank)) if rank else ()
        n = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(bytes(take(8 * n)), dtype="<f8").reshape(dims).astype(np.float64)
        out[name] = arr
    if pos != len(view):
        raise CheckpointError("trailing bytes after last tensor record")
    return out


def save_tensors(path, tensors: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps_tensors(tensors))


def load_tensors(path) -> dict[str, np.ndarray]:
    return loads_tensors(Path(path).read_bytes())
