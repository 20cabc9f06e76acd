# app/db/models/run.py
from __future__ import annotations

import enum
from datetime import datetime
from typing import Any, Dict, Optional

from sqlalchemy import DateTime, Index, Integer, String, Text
from sqlalchemy.orm import Mapped, mapped_column
from sqlalchemy.types import JSON

from app.db.base import Base


class RunStatus(str, enum.Enum):
    success = "success"
    failed = "failed"
    running = "running"


class RunType(str, enum.Enum):
    ingest = "ingest"
    train = "train"
    evaluate = "evaluate"
    ablate = "ablate"
    gradcheck = "gradcheck"
    warm_up = "warm-up"
    serve_sim = "serve-sim"
    bench = "bench"
    snapshot = "snapshot"
    rollback = "rollback"
    outsync = "outsync"


class MimnRun(Base):
    """CLI コマンド1回分の実行記録。"""

    __tablename__ = "mimn_runs"

    id: Mapped[int] = mapped_column(Integer, primary_key=True)
    command: Mapped[str] = mapped_column(String(32), nullable=False)
    status: Mapped[str] = mapped_column(String(16), default=RunStatus.running.value, nullable=False)

    params: Mapped[Dict[str, Any]] = mapped_column(JSON, default=dict, nullable=False)
    result: Mapped[Optional[Dict[str, Any]]] = mapped_column(JSON)
    output_dir: Mapped[Optional[str]] = mapped_column(String(512))

    started_at: Mapped[datetime] = mapped_column(DateTime, default=datetime.utcnow, nullable=False)
    finished_at: Mapped[Optional[datetime]] = mapped_column(DateTime)
    error: Mapped[Optional[str]] = mapped_column(Text)

    __table_args__ = (Index("ix_mimn_runs_command_started", "command", "started_at"),)
