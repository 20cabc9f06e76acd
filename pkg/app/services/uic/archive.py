# app/services/uic/archive.py
from __future__ import annotations

import logging
import os
from pathlib import Path
from typing import Callable, List, Optional

from sqlalchemy import select
from sqlalchemy.orm import Session

from app.core.errors import SnapshotError
from app.db.models.snapshot import SnapshotRecord
from app.services.pipeline.runner import db_transaction
from app.services.uic.snapshot import Snapshot, SnapshotMeta

logger = logging.getLogger(__name__)

CURRENT_FILE = "current.uic"
SUFFIX = ".uic"


def _write_atomic(path: Path, data: bytes) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(data)
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp, path)


class SnapshotArchive:
    """
    snapshot blob を state_dir にファイルとして置き、catalog を uic_snapshots テーブルに持つ。
    current.uic は CLI 実行をまたいで使う「現在の状態」。
    """

    def __init__(self, state_dir: Path, session_factory: Optional[Callable[[], Session]] = None):
        self.state_dir = Path(state_dir)
        self.state_dir.mkdir(parents=True, exist_ok=True)
        if session_factory is None:
            from app.db.session import new_session

            session_factory = new_session
        self.session_factory = session_factory

    def path_for(self, snapshot_id: str) -> Path:
        return self.state_dir / f"{snapshot_id}{SUFFIX}"

    # -------------------------
    # catalog
    # -------------------------
    def put(self, snap: Snapshot) -> None:
        path = self.path_for(snap.snapshot_id)
        _write_atomic(path, snap.blob)
        meta = snap.meta
        db = self.session_factory()
        try:
            with db_transaction(db):
                db.add(
                    SnapshotRecord(
                        snapshot_id=meta.snapshot_id,
                        created_at=meta.created_at.replace(tzinfo=None),
                        param_version=meta.param_version,
                        user_count=meta.user_count,
                        checksum=meta.checksum,
                        path=str(path),
                        size_bytes=meta.size_bytes,
                    )
                )
        except Exception:
            path.unlink(missing_ok=True)
            raise
        finally:
            db.close()

    def remove(self, snapshot_id: str) -> None:
        db = self.session_factory()
        try:
            with db_transaction(db):
                rec = db.scalar(select(SnapshotRecord).where(SnapshotRecord.snapshot_id == snapshot_id))
                if rec is not None:
                    db.delete(rec)
        finally:
            db.close()
        self.path_for(snapshot_id).unlink(missing_ok=True)

    def get(self, snapshot_id: str) -> bytes:
        path = self.path_for(snapshot_id)
        if not path.exists():
            raise SnapshotError(f"snapshot {snapshot_id!r} not found")
        return path.read_bytes()

    def catalog(self) -> List[SnapshotMeta]:
        db = self.session_factory()
        try:
            stmt = (
                select(SnapshotRecord)
                .where(SnapshotRecord.path.startswith(str(self.state_dir)))
                .order_by(SnapshotRecord.created_at, SnapshotRecord.id)
            )
            rows = db.scalars(stmt).all()
            return [
                SnapshotMeta(
                    snapshot_id=r.snapshot_id,
                    created_at=r.created_at,
                    param_version=r.param_version,
                    user_count=r.user_count,
                    checksum=r.checksum,
                    size_bytes=r.size_bytes,
                )
                for r in rows
            ]
        finally:
            db.close()

    # -------------------------
    # live state between CLI runs
    # -------------------------
    @property
    def current_path(self) -> Path:
        return self.state_dir / CURRENT_FILE

    def write_current(self, blob: bytes) -> Path:
        _write_atomic(self.current_path, blob)
        return self.current_path

    def read_current(self) -> Optional[bytes]:
        if not self.current_path.exists():
            return None
        return self.current_path.read_bytes()
