# app/services/uic/snapshot.py
"""
UIC snapshot のバイナリ形式（little-endian）

header
  magic           8 bytes  b"MIMNUIC\\x00"
  format version  u16
  param version   i64
  user count      u32
  m, d, h         u32 x 3
  created_at      f64 (unix 秒)
  snapshot id     u16 長 + utf-8
records（user_id 昇順）
  user_id         u32 長 + utf-8
  t               u64
  version         i64
  M, S, g         f64 row-major（m*d, m*h, m）
trailer
  checksum        8 bytes  BLAKE2b-64(header + records)
"""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from datetime import datetime, timezone
from typing import Dict, Mapping, Tuple

import numpy as np

from app.core.errors import SnapshotError
from app.services.mimn.state import UserInterestState

MAGIC = b"MIMNUIC\x00"
FORMAT_VERSION = 1
CHECKSUM_BYTES = 8

_HEADER = struct.Struct("<8sHqIIIId")
_RECORD = struct.Struct("<Qq")
_F8 = np.dtype("<f8")


def checksum(data: bytes) -> bytes:
    return hashlib.blake2b(data, digest_size=CHECKSUM_BYTES).digest()


@dataclass(frozen=True)
class SnapshotMeta:
    snapshot_id: str
    created_at: datetime
    param_version: int
    user_count: int
    checksum: str
    size_bytes: int


@dataclass(frozen=True)
class Snapshot:
    meta: SnapshotMeta
    blob: bytes

    @property
    def snapshot_id(self) -> str:
        return self.meta.snapshot_id


def encode_snapshot(
    snapshot_id: str,
    states: Mapping[str, UserInterestState],
    param_version: int,
    dims: Tuple[int, int, int],
    created_at: datetime,
) -> Snapshot:
    m, d, h = dims
    sid = snapshot_id.encode("utf-8")
    parts = [
        _HEADER.pack(MAGIC, FORMAT_VERSION, param_version, len(states), m, d, h, created_at.timestamp()),
        struct.pack("<H", len(sid)),
        sid,
    ]
    for uid in sorted(states):
        st = states[uid]
        if st.dims != (m, d, h):
            raise SnapshotError(f"user {uid!r}: state dims {st.dims} differ from snapshot dims {dims}")
        u = uid.encode("utf-8")
        parts.append(struct.pack("<I", len(u)))
        parts.append(u)
        parts.append(_RECORD.pack(st.t, st.version))
        for arr in (st.M, st.S, st.g):
            parts.append(np.ascontiguousarray(arr, dtype=_F8).tobytes())

    body = b"".join(parts)
    digest = checksum(body)
    blob = body + digest
    meta = SnapshotMeta(
        snapshot_id=snapshot_id,
        created_at=created_at,
        param_version=param_version,
        user_count=len(states),
        checksum=digest.hex(),
        size_bytes=len(blob),
    )
    return Snapshot(meta=meta, blob=blob)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise SnapshotError("snapshot truncated")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: struct.Struct) -> tuple:
        return fmt.unpack(self.take(fmt.size))

    def array(self, count: int, shape: Tuple[int, ...]) -> np.ndarray:
        raw = self.take(count * 8)
        return np.frombuffer(raw, dtype=_F8).astype(np.float64).reshape(shape)


def decode_snapshot(blob: bytes) -> Tuple[SnapshotMeta, Dict[str, UserInterestState], Tuple[int, int, int]]:
    if len(blob) < _HEADER.size + CHECKSUM_BYTES:
        raise SnapshotError("snapshot too short")
    body, digest = blob[:-CHECKSUM_BYTES], blob[-CHECKSUM_BYTES:]
    if checksum(body) != digest:
        raise SnapshotError("snapshot checksum mismatch")

    r = _Reader(body)
    magic, version, param_version, count, m, d, h, created = r.unpack(_HEADER)
    if magic != MAGIC:
        raise SnapshotError("not a UIC snapshot (bad magic)")
    if version != FORMAT_VERSION:
        raise SnapshotError(f"unsupported snapshot format version {version}")
    (sid_len,) = struct.unpack("<H", r.take(2))
    snapshot_id = r.take(sid_len).decode("utf-8")

    states: Dict[str, UserInterestState] = {}
    for _ in range(count):
        (ulen,) = struct.unpack("<I", r.take(4))
        uid = r.take(ulen).decode("utf-8")
        t, st_version = r.unpack(_RECORD)
        states[uid] = UserInterestState(
            M=r.array(m * d, (m, d)),
            S=r.array(m * h, (m, h)),
            g=r.array(m, (m,)),
            t=int(t),
            version=int(st_version),
        )
    if r.pos != len(body):
        raise SnapshotError("trailing bytes after snapshot records")

    meta = SnapshotMeta(
        snapshot_id=snapshot_id,
        created_at=datetime.fromtimestamp(created, tz=timezone.utc),
        param_version=int(param_version),
        user_count=int(count),
        checksum=digest.hex(),
        size_bytes=len(blob),
    )
    return meta, states, (int(m), int(d), int(h))
