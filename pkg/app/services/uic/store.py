# app/services/uic/store.py
from __future__ import annotations

import itertools
import logging
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Dict, Iterable, Iterator, List, Mapping, Optional, Sequence, Tuple, Union

from app.core.errors import (
    MimnError,
    SnapshotError,
    StateQuarantinedError,
    VersionConflictError,
)
from app.schemas.config import HyperParams
from app.schemas.events import BehaviorEvent
from app.services.data.vocab import Vocabulary
from app.services.mimn.model import process_sequence
from app.services.mimn.params import ModelParams
from app.services.mimn.state import UserInterestState, initial_state
from app.services.uic.archive import SnapshotArchive
from app.services.uic.snapshot import Snapshot, SnapshotMeta, decode_snapshot, encode_snapshot

logger = logging.getLogger(__name__)

DEFAULT_RETENTION = 7

# (item_id, category_id) もしくは (item_id, category_id, timestamp)
EventLike = Union[BehaviorEvent, Tuple[str, str], Tuple[str, str, int]]


@dataclass(frozen=True)
class ModelRelease:
    """UIC が使う parameter 一式。deploy は release ごと差し替える。"""

    params: ModelParams
    hyper: HyperParams
    vocab: Optional[Vocabulary] = None

    @property
    def version(self) -> int:
        return self.params.version

    def encode(self, item_id: str, category_id: str) -> Tuple[int, int]:
        policy = self.hyper.unknown_id_policy
        if self.vocab is None:
            return int(item_id), int(category_id)
        return self.vocab.item(item_id, policy), self.vocab.category(category_id, policy)


@dataclass
class WarmUpResult:
    initialized: int = 0
    failed: Dict[str, str] = field(default_factory=dict)


class _Gate:
    """通常操作は shared、rollback / warm-up は exclusive。"""

    def __init__(self) -> None:
        self._cond = threading.Condition()
        self._shared = 0
        self._exclusive = False

    @contextmanager
    def shared(self) -> Iterator[None]:
        with self._cond:
            while self._exclusive:
                self._cond.wait()
            self._shared += 1
        try:
            yield
        finally:
            with self._cond:
                self._shared -= 1
                if self._shared == 0:
                    self._cond.notify_all()

    @contextmanager
    def exclusive(self) -> Iterator[None]:
        with self._cond:
            while self._exclusive:
                self._cond.wait()
            self._exclusive = True
            while self._shared:
                self._cond.wait()
        try:
            yield
        finally:
            with self._cond:
                self._exclusive = False
                self._cond.notify_all()


class StateStore:
    """
    User Interest Center: user_id -> UserInterestState。
    - 同一 user のイベントは user ごとの lock で直列化、別 user は並列
    - states は不変オブジェクトの dict。commit は短い lock の下で1エントリ差し替え
    - parameter は ModelRelease の参照を差し替えるだけ（処理中の更新は旧 release のまま完了）
    """

    def __init__(
        self,
        release: ModelRelease,
        retention: int = DEFAULT_RETENTION,
        archive: Optional[SnapshotArchive] = None,
    ):
        if retention < 1:
            raise ValueError("retention must be >= 1")
        self._release = release
        self.retention = retention
        self.archive = archive

        self._states: Dict[str, UserInterestState] = {}
        self._quarantine: Dict[str, str] = {}
        self._commit_lock = threading.Lock()
        self._locks_lock = threading.Lock()
        self._user_locks: Dict[str, threading.Lock] = {}
        self._gate = _Gate()

        self._catalog: List[SnapshotMeta] = archive.catalog() if archive is not None else []
        self._blobs: Dict[str, bytes] = {}
        self._snap_seq = itertools.count(len(self._catalog) + 1)

    # -------------------------
    # helpers
    # -------------------------
    @property
    def release(self) -> ModelRelease:
        return self._release

    @property
    def hyper(self) -> HyperParams:
        return self._release.hyper

    @property
    def param_version(self) -> int:
        return self._release.version

    def _user_lock(self, user_id: str) -> threading.Lock:
        lock = self._user_locks.get(user_id)
        if lock is None:
            with self._locks_lock:
                lock = self._user_locks.setdefault(user_id, threading.Lock())
        return lock

    def _commit(self, user_id: str, state: UserInterestState) -> None:
        with self._commit_lock:
            self._states[user_id] = state

    def _quarantine_user(self, user_id: str, reason: str) -> None:
        with self._commit_lock:
            if user_id not in self._quarantine:
                logger.warning("quarantine user %s: %s", user_id, reason)
            self._quarantine[user_id] = reason

    def __len__(self) -> int:
        return len(self._states)

    def user_ids(self) -> List[str]:
        return sorted(self._states)

    def is_quarantined(self, user_id: str) -> bool:
        return user_id in self._quarantine

    def quarantined(self) -> Dict[str, str]:
        return dict(self._quarantine)

    def has_state(self, user_id: str) -> bool:
        return user_id in self._states

    # -------------------------
    # events
    # -------------------------
    def apply_event(self, event: BehaviorEvent) -> UserInterestState:
        user_id = event.user_id
        with self._gate.shared():
            with self._user_lock(user_id):
                release = self._release
                reason = self._quarantine.get(user_id)
                if reason is not None:
                    raise StateQuarantinedError(user_id, reason)

                state = self._states.get(user_id)
                if state is None:
                    state = initial_state(release.hyper, release.version)
                elif not state.matches(release.hyper):
                    reason = f"stored dims {state.dims} != active hyper {release.hyper.dims()}"
                    self._quarantine_user(user_id, reason)
                    raise StateQuarantinedError(user_id, reason)

                pair = release.encode(event.item_id, event.category_id)
                new_state, _ = process_sequence(release.params, release.hyper, [pair], state)
                self._commit(user_id, new_state)
                return new_state

    def apply_events(self, events: Iterable[BehaviorEvent]) -> Tuple[int, List[str]]:
        applied = 0
        errors: List[str] = []
        for ev in events:
            try:
                self.apply_event(ev)
                applied += 1
            except MimnError as e:
                errors.append(str(e))
        return applied, errors

    def get_state(self, user_id: str) -> UserInterestState:
        release = self._release
        state = self._states.get(user_id)
        if state is None:
            return initial_state(release.hyper, release.version)
        if not state.matches(release.hyper):
            self._quarantine_user(user_id, f"stored dims {state.dims} != active hyper {release.hyper.dims()}")
            return initial_state(release.hyper, release.version)
        return state

    def reset_user(self, user_id: str) -> None:
        with self._user_lock(user_id):
            with self._commit_lock:
                self._states.pop(user_id, None)
                self._quarantine.pop(user_id, None)

    # -------------------------
    # warm-up
    # -------------------------
    def warm_up(self, histories: Mapping[str, Sequence[EventLike]]) -> WarmUpResult:
        """
        user ごとに cold start から履歴を流して状態を作り直す（既存状態は上書き）。
        失敗した user は数えるだけで全体は止めない。
        """
        result = WarmUpResult()
        with self._gate.exclusive():
            release = self._release
            for user_id, events in histories.items():
                if not events:
                    continue
                try:
                    pairs = [release.encode(*_pair_of(ev)) for ev in events]
                    state, _ = process_sequence(release.params, release.hyper, pairs)
                except (MimnError, ValueError, TypeError) as e:
                    result.failed[user_id] = str(e)
                    logger.warning("warm-up failed for user %s: %s", user_id, e)
                    continue
                with self._commit_lock:
                    self._states[user_id] = state
                    self._quarantine.pop(user_id, None)
                result.initialized += 1
        logger.info("warm-up: %d users initialized, %d failed", result.initialized, len(result.failed))
        return result

    # -------------------------
    # parameter deployment
    # -------------------------
    def deploy_params(
        self,
        new_params: ModelParams,
        version: int,
        hyper: Optional[HyperParams] = None,
        vocab: Optional[Vocabulary] = None,
    ) -> ModelRelease:
        with self._commit_lock:
            current = self._release
            if version <= current.version:
                raise VersionConflictError(f"deploy version {version} must be greater than active {current.version}")
            params = ModelParams(tensors=new_params.tensors, version=version, kind=new_params.kind, meta=new_params.meta)
            self._release = ModelRelease(
                params=params,
                hyper=hyper or current.hyper,
                vocab=vocab if vocab is not None else current.vocab,
            )
        logger.info("deployed parameter version %d (was %d)", version, current.version)
        return self._release

    # -------------------------
    # snapshot / rollback
    # -------------------------
    def catalog(self) -> List[SnapshotMeta]:
        return list(self._catalog)

    def consistent_view(self) -> Tuple[Dict[str, UserInterestState], int]:
        with self._commit_lock:
            return dict(self._states), self._release.version

    def encode_states(self, snapshot_id: str) -> Snapshot:
        states, version = self.consistent_view()
        h = self.hyper
        return encode_snapshot(snapshot_id, states, version, (h.m, h.d, h.h), datetime.now(timezone.utc))

    def snapshot(self) -> Snapshot:
        now = datetime.now(timezone.utc)
        snapshot_id = f"snap-{now:%Y%m%dT%H%M%S%f}-{next(self._snap_seq):04d}"
        # 直列化に失敗した場合は catalog を触らない
        snap = self.encode_states(snapshot_id)

        if self.archive is not None:
            self.archive.put(snap)
        else:
            self._blobs[snap.snapshot_id] = snap.blob
        self._catalog.append(snap.meta)
        logger.info("snapshot %s: %d users, %d bytes", snap.snapshot_id, snap.meta.user_count, snap.meta.size_bytes)

        while len(self._catalog) > self.retention:
            old = self._catalog.pop(0)
            if self.archive is not None:
                self.archive.remove(old.snapshot_id)
            else:
                self._blobs.pop(old.snapshot_id, None)
            logger.info("snapshot %s evicted (retention %d)", old.snapshot_id, self.retention)
        return snap

    def snapshot_blob(self, snapshot_id: str) -> bytes:
        if not any(m.snapshot_id == snapshot_id for m in self._catalog):
            raise SnapshotError(f"snapshot {snapshot_id!r} not in catalog")
        if self.archive is not None:
            return self.archive.get(snapshot_id)
        return self._blobs[snapshot_id]

    def restore_blob(self, blob: bytes) -> int:
        """blob を検証してから全状態を置き換える。失敗時は何も変えない。"""
        _, states, _ = decode_snapshot(blob)
        with self._gate.exclusive():
            with self._commit_lock:
                self._states = dict(states)
                self._quarantine.clear()
        return len(states)

    def rollback(self, snapshot_id: str) -> int:
        restored = self.restore_blob(self.snapshot_blob(snapshot_id))
        logger.info("rolled back to %s (%d users)", snapshot_id, restored)
        return restored


def _pair_of(event: EventLike) -> Tuple[str, str]:
    if isinstance(event, BehaviorEvent):
        return event.item_id, event.category_id
    return str(event[0]), str(event[1])
