# app/schemas/events.py
from __future__ import annotations

from typing import List

from pydantic import BaseModel, Field, field_validator


class BehaviorEvent(BaseModel):
    user_id: str = Field(min_length=1)
    item_id: str = Field(min_length=1)
    category_id: str = Field(min_length=1)
    timestamp: int = Field(ge=0)

    @field_validator("user_id", "item_id", "category_id")
    @classmethod
    def _strip(cls, v: str) -> str:
        v = v.strip()
        if not v:
            raise ValueError("must be nonempty")
        return v


class EventBatchIn(BaseModel):
    events: List[BehaviorEvent] = Field(min_length=1)


class EventBatchOut(BaseModel):
    applied: int
    rejected: int = 0
    errors: List[str] = Field(default_factory=list)


class Candidate(BaseModel):
    item_id: str = Field(min_length=1)
    category_id: str = Field(min_length=1)


class ScoreRequest(BaseModel):
    user_id: str = Field(min_length=1)
    candidates: List[Candidate] = Field(min_length=1)
    profile: List[float] = Field(default_factory=list)


class ScoreResponse(BaseModel):
    user_id: str
    scores: List[float]
    param_version: int
    state_version: int


class StateSummaryOut(BaseModel):
    user_id: str
    t: int
    version: int
    cold_start: bool
    quarantined: bool = False
    slot_utilization: List[float]
    state_bytes: int


class SnapshotOut(BaseModel):
    snapshot_id: str
    created_at: str
    param_version: int
    user_count: int
    checksum: str
    size_bytes: int


class RollbackOut(BaseModel):
    snapshot_id: str
    restored_users: int
