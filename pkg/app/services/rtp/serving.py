# app/services/rtp/serving.py
from __future__ import annotations

from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from app.schemas.events import BehaviorEvent, ScoreRequest
from app.services.mimn.model import predict, process_sequence
from app.services.mimn.state import UserInterestState, initial_state
from app.services.uic.store import ModelRelease, StateStore

LogEntry = Union[BehaviorEvent, Tuple[str, str], Tuple[str, str, int]]


def _profile(req: ScoreRequest, release: ModelRelease) -> Optional[np.ndarray]:
    if not release.hyper.profile_dim:
        return None
    if req.profile:
        return np.asarray(req.profile, dtype=np.float64)
    return np.zeros(release.hyper.profile_dim)


def score_state(req: ScoreRequest, state: UserInterestState, release: ModelRelease) -> List[float]:
    profile = _profile(req, release)
    scores: List[float] = []
    for c in req.candidates:
        item, cat = release.encode(c.item_id, c.category_id)
        scores.append(predict(release.params, state, item, cat, profile, release.hyper))
    return scores


def handle_request(req: ScoreRequest, store: StateStore, release: Optional[ModelRelease] = None) -> List[float]:
    """
    UIC の固定サイズ状態を読み、予測部分だけを候補ごとに実行する。
    release を渡すと store と別の parameter で採点する（out-sync 実験用）。
    """
    release = release or store.release
    return score_state(req, store.get_state(req.user_id), release)


def handle_request_recompute(
    req: ScoreRequest,
    behavior_log: Sequence[LogEntry],
    release: ModelRelease,
) -> List[float]:
    """リクエストの中で全履歴から状態を作り直してから採点する（比較用）。"""
    if behavior_log:
        pairs = [release.encode(*_pair(ev)) for ev in behavior_log]
        state, _ = process_sequence(release.params, release.hyper, pairs)
    else:
        state = initial_state(release.hyper, release.version)
    return score_state(req, state, release)


def _pair(ev: LogEntry) -> Tuple[str, str]:
    if isinstance(ev, BehaviorEvent):
        return ev.item_id, ev.category_id
    return str(ev[0]), str(ev[1])
