# app/db/models/__init__.py
from app.db.base import Base
from app.db.models.run import MimnRun, RunStatus, RunType
from app.db.models.snapshot import SnapshotRecord
