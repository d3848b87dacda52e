"""Binary ScanRecord files: one preprocessed scan with its training triplets.

Layout (little-endian): magic ``IMFSCAN1``; u32 version, n_triplets, k, m;
identity and expression labels as u32 length + UTF-8 bytes; u8 neutral flag;
f64 landmarks (k,3); f64 dense landmarks (m,3); u32 dense ids (m,);
f64 triplets (n,7) as ``(p, s, n)`` rows.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .sampling import Triplets

MAGIC = b"IMFSCAN1"
VERSION = 1


class ScanRecordError(ValueError):
    pass


@dataclass
class ScanRecord:
    identity: str
    expression: str
    is_neutral: bool
    landmarks: np.ndarray
    triplets: Triplets
    dense: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    dense_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))

    def __post_init__(self):
        self.landmarks = np.asarray(self.landmarks, np.float64).reshape(-1, 3)
        self.dense = np.asarray(self.dense, np.float64).reshape(-1, 3)
        self.dense_ids = np.asarray(self.dense_ids, np.int64).reshape(-1)
        if len(self.dense_ids) != len(self.dense):
            raise ScanRecordError("dense ids and dense landmarks differ in length")

    @property
    def k(self) -> int:
        return len(self.landmarks)


def _pack_str(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<I", len(b)) + b


def write_scan_record(path, rec: ScanRecord) -> None:
    head = MAGIC + struct.pack("<IIII", VERSION, len(rec.triplets), rec.k, len(rec.dense))
    head += _pack_str(rec.identity) + _pack_str(rec.expression)
    head += struct.pack("<B", int(bool(rec.is_neutral)))
    body = [rec.landmarks.astype("<f8").tobytes(), rec.dense.astype("<f8").tobytes(),
            rec.dense_ids.astype("<u4").tobytes(), rec.triplets.packed().astype("<f8").tobytes()]
    Path(path).write_bytes(head + b"".join(body))


def read_scan_record(path) -> ScanRecord:
    buf = Path(path).read_bytes()
    if buf[:8] != MAGIC:
        raise ScanRecordError(f"{path}: not a ScanRecord file")
    try:
        version, n, k, m = struct.unpack_from("<IIII", buf, 8)
        if version != VERSION:
            raise ScanRecordError(f"{path}: unsupported version {version}")
        off = 24
        labels = []
        for _ in range(2):
            (ln,) = struct.unpack_from("<I", buf, off)
            labels.append(buf[off + 4:off + 4 + ln].decode("utf-8"))
            off += 4 + ln
        neutral = bool(buf[off])
        off += 1

        def take(count, dtype):
            nonlocal off
            arr = np.frombuffer(buf, dtype=dtype, count=count, offset=off)
            off += arr.nbytes
            return arr

        lm = take(3 * k, "<f8").reshape(k, 3)
        dense = take(3 * m, "<f8").reshape(m, 3)
        ids = take(m, "<u4").astype(np.int64)
        rows = take(7 * n, "<f8").reshape(n, 7)
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise ScanRecordError(f"{path}: truncated or corrupt record") from exc
    if off != len(buf):
        raise ScanRecordError(f"{path}: trailing bytes")
    return ScanRecord(labels[0], labels[1], neutral, lm.astype(np.float64),
                      Triplets.from_packed(rows), dense.astype(np.float64), ids)
