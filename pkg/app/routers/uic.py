# app/routers/uic.py
from __future__ import annotations

from typing import Union

from fastapi import APIRouter, Depends

from app.routers.deps import get_store, http_error
from app.schemas.events import (
    BehaviorEvent,
    EventBatchIn,
    EventBatchOut,
    RollbackOut,
    SnapshotOut,
    StateSummaryOut,
)
from app.services.mimn.state import slot_utilization
from app.services.uic.store import StateStore

router = APIRouter(prefix="/uic", tags=["uic"])


@router.post("/events", response_model=EventBatchOut)
def post_events(
    body: Union[EventBatchIn, BehaviorEvent],
    store: StateStore = Depends(get_store),
) -> EventBatchOut:
    """1件でも {"events": [...]} でも受ける。失敗したイベントは errors に理由を入れて返す。"""
    events = body.events if isinstance(body, EventBatchIn) else [body]
    try:
        applied, errors = store.apply_events(events)
    except Exception as e:
        raise http_error(e)
    return EventBatchOut(applied=applied, rejected=len(errors), errors=errors)


@router.get("/users/{user_id}", response_model=StateSummaryOut)
def get_user(user_id: str, store: StateStore = Depends(get_store)) -> StateSummaryOut:
    state = store.get_state(user_id)
    return StateSummaryOut(
        user_id=user_id,
        t=state.t,
        version=state.version,
        cold_start=not store.has_state(user_id),
        quarantined=store.is_quarantined(user_id),
        slot_utilization=slot_utilization(state.g).tolist(),
        state_bytes=state.nbytes(),
    )


@router.post("/snapshots", response_model=SnapshotOut)
def post_snapshot(store: StateStore = Depends(get_store)) -> SnapshotOut:
    try:
        meta = store.snapshot().meta
    except Exception as e:
        raise http_error(e)
    return SnapshotOut(
        snapshot_id=meta.snapshot_id,
        created_at=meta.created_at.isoformat(),
        param_version=meta.param_version,
        user_count=meta.user_count,
        checksum=meta.checksum,
        size_bytes=meta.size_bytes,
    )


@router.post("/rollback/{snapshot_id}", response_model=RollbackOut)
def post_rollback(snapshot_id: str, store: StateStore = Depends(get_store)) -> RollbackOut:
    try:
        restored = store.rollback(snapshot_id)
    except Exception as e:
        raise http_error(e)
    return RollbackOut(snapshot_id=snapshot_id, restored_users=restored)
