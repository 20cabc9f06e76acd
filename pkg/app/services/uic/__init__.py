# app/services/uic/__init__.py
from app.services.uic.archive import SnapshotArchive
from app.services.uic.snapshot import Snapshot, SnapshotMeta, decode_snapshot, encode_snapshot
from app.services.uic.store import ModelRelease, StateStore, WarmUpResult

__all__ = [
    "ModelRelease",
    "Snapshot",
    "SnapshotArchive",
    "SnapshotMeta",
    "StateStore",
    "WarmUpResult",
    "decode_snapshot",
    "encode_snapshot",
]
