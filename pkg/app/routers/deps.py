# app/routers/deps.py
from __future__ import annotations

from fastapi import HTTPException, Request

from app.core.errors import (
    ConfigError,
    DataError,
    MimnError,
    ShapeMismatchError,
    SnapshotError,
    StateQuarantinedError,
    UnknownIdError,
    VersionConflictError,
)
from app.services.uic.store import StateStore

# 上から順に isinstance で見る
_STATUS = (
    (SnapshotError, 404),
    (UnknownIdError, 404),
    (StateQuarantinedError, 409),
    (VersionConflictError, 409),
    (ShapeMismatchError, 422),
    (DataError, 422),
    (ConfigError, 400),
)


def get_store(request: Request) -> StateStore:
    store = getattr(request.app.state, "store", None)
    if store is None:
        raise HTTPException(status_code=503, detail="UIC store is not configured (set MIMN_CHECKPOINT)")
    return store


def http_error(e: Exception) -> HTTPException:
    if isinstance(e, MimnError):
        for cls, status in _STATUS:
            if isinstance(e, cls):
                return HTTPException(status_code=status, detail=str(e))
        return HTTPException(status_code=400, detail=str(e))
    return HTTPException(status_code=500, detail=str(e))
