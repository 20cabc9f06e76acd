# app/services/rtp/bench.py
from __future__ import annotations

import logging
import threading
import time
from collections import deque
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Deque, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from dotenv import dotenv_values

from app.core.errors import ConfigError, DataError
from app.schemas.config import LoadProfile
from app.schemas.events import BehaviorEvent, Candidate, ScoreRequest
from app.services.mimn.state import state_nbytes
from app.services.rtp.serving import handle_request, handle_request_recompute
from app.services.rtp.storage import raw_history_bytes
from app.services.uic.store import ModelRelease, StateStore

logger = logging.getLogger(__name__)

BENCH_COLUMNS = ["mode", "history_len", "p50", "p90", "p99", "qps", "bytes_per_user"]

# 予定時刻からの遅れがこれを超えたリクエストが1割を超えたら飽和とみなす
SATURATION_LAG_S = 0.05

Event = Tuple[str, str, int]


@dataclass
class BenchRow:
    mode: str
    history_len: int
    p50: float = 0.0
    p90: float = 0.0
    p99: float = 0.0
    mean: float = 0.0
    qps: float = 0.0
    bytes_per_user: int = 0
    requests: int = 0
    events: int = 0
    target_qps: float = 0.0
    saturated: bool = False


@dataclass
class BenchReport:
    rows: List[BenchRow] = field(default_factory=list)

    def add(self, row: BenchRow) -> None:
        self.rows.append(row)

    def extend(self, other: "BenchReport") -> None:
        self.rows.extend(other.rows)

    def to_frame(self) -> pd.DataFrame:
        df = pd.DataFrame([asdict(r) for r in self.rows])
        if df.empty:
            return pd.DataFrame(columns=BENCH_COLUMNS)
        extra = [c for c in df.columns if c not in BENCH_COLUMNS]
        return df[BENCH_COLUMNS + extra]

    def to_text(self) -> str:
        return self.to_frame().to_string(index=False, float_format=lambda v: f"{v:.3f}")

    def to_csv(self, path: Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.to_frame()[BENCH_COLUMNS].to_csv(path, index=False)
        return path


# =========================
# load profile file
# =========================
def load_profile(path: Path) -> LoadProfile:
    """key=value 形式（dotenv と同じ書式）の load profile を読む。"""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"load profile not found: {path}")
    values = {k.strip().lower(): v for k, v in dotenv_values(path).items() if v is not None}
    try:
        return LoadProfile.model_validate(values)
    except ValueError as e:
        raise ConfigError(f"{path}: invalid load profile: {e}") from None


# =========================
# schedule
# =========================
@dataclass
class Schedule:
    requests: List[Tuple[float, ScoreRequest]]
    events: List[Tuple[float, BehaviorEvent]]


def build_schedule(profile: LoadProfile, users: Sequence[str], catalog: Sequence[Tuple[str, str]]) -> Schedule:
    """seed が同じなら同じリクエスト / イベント列になる（時刻は相対秒）。"""
    rng = np.random.default_rng(profile.seed)
    n_req = int(profile.request_rate * profile.duration)
    n_ev = int(profile.event_rate * profile.duration)

    requests: List[Tuple[float, ScoreRequest]] = []
    for i in range(n_req):
        user = users[int(rng.integers(len(users)))]
        picks = rng.integers(len(catalog), size=profile.candidates)
        cands = [Candidate(item_id=catalog[int(j)][0], category_id=catalog[int(j)][1]) for j in picks]
        requests.append((i / profile.request_rate, ScoreRequest(user_id=user, candidates=cands)))

    events: List[Tuple[float, BehaviorEvent]] = []
    for j in range(n_ev):
        user = users[int(rng.integers(len(users)))]
        item, cat = catalog[int(rng.integers(len(catalog)))]
        events.append(
            (j / profile.event_rate, BehaviorEvent(user_id=user, item_id=item, category_id=cat, timestamp=j))
        )
    return Schedule(requests=requests, events=events)


def _percentiles(lat_ms: np.ndarray) -> Tuple[float, float, float, float]:
    if lat_ms.size == 0:
        return 0.0, 0.0, 0.0, 0.0
    p50, p90, p99 = np.percentile(lat_ms, [50, 90, 99])
    return float(p50), float(p90), float(p99), float(lat_ms.mean())


# =========================
# run
# =========================
def run_bench(
    profile: LoadProfile,
    streams: Mapping[str, Sequence[Event]],
    release: ModelRelease,
    catalog: Optional[Sequence[Tuple[str, str]]] = None,
) -> BenchReport:
    """
    リクエストとイベントを同じ時計で流し、採点呼び出しの wall-clock を測る。
    uic: 状態は warm-up 済み、イベントは store に非同期で反映
    recompute: リクエストのたびに全履歴から状態を作り直す
    """
    L = profile.history_len
    report = BenchReport()
    bytes_per_user = state_nbytes(release.hyper) if profile.mode == "uic" else raw_history_bytes(L)
    row = BenchRow(mode=profile.mode, history_len=L, bytes_per_user=bytes_per_user, target_qps=profile.request_rate)

    users = [u for u, evs in streams.items() if len(evs) >= L][: profile.users]
    if not users:
        raise DataError(f"no user with at least {L} events for the bench")
    if catalog is None:
        catalog = sorted({(i, c) for u in users for i, c, _ in streams[u]})
    schedule = build_schedule(profile, users, catalog)
    if not schedule.requests:
        report.add(row)
        return report

    store: Optional[StateStore] = None
    # recompute 側の生ログは直近 L 件だけ持つ
    logs: Dict[str, Deque[Tuple[str, str]]] = {}
    logs_lock = threading.Lock()
    if profile.mode == "uic":
        store = StateStore(release)
        store.warm_up({u: [(i, c) for i, c, _ in streams[u][:L]] for u in users})
    else:
        logs = {u: deque(((i, c) for i, c, _ in streams[u][:L]), maxlen=L) for u in users}

    def score(req: ScoreRequest) -> float:
        t0 = time.perf_counter()
        if store is not None:
            handle_request(req, store)
        else:
            with logs_lock:
                history = list(logs[req.user_id])
            handle_request_recompute(req, history, release)
        return time.perf_counter() - t0

    def apply_events(start: float) -> int:
        done = 0
        for due, ev in schedule.events:
            delay = start + due - time.perf_counter()
            if delay > 0:
                time.sleep(delay)
            if store is not None:
                store.apply_event(ev)
            else:
                with logs_lock:
                    logs[ev.user_id].append((ev.item_id, ev.category_id))
            done += 1
        return done

    lags: List[float] = []
    futures: List[Future] = []
    with ThreadPoolExecutor(max_workers=1, thread_name_prefix="bench-events") as producer:
        start = time.perf_counter()
        events_done = producer.submit(apply_events, start)
        with ThreadPoolExecutor(max_workers=profile.workers) as pool:
            for due, req in schedule.requests:
                delay = start + due - time.perf_counter()
                if delay > 0:
                    time.sleep(delay)
                else:
                    lags.append(-delay)
                futures.append(pool.submit(score, req))
            latencies = np.array([f.result() for f in futures]) * 1000.0
        elapsed = time.perf_counter() - start
        # producer 側の例外はここで呼び出し元に上がる
        row.events = events_done.result()

    row.p50, row.p90, row.p99, row.mean = _percentiles(latencies)
    row.requests = int(latencies.size)
    row.qps = row.requests / elapsed if elapsed > 0 else 0.0
    late = sum(1 for lag in lags if lag > SATURATION_LAG_S)
    row.saturated = late > 0.1 * row.requests or row.qps < 0.9 * profile.request_rate
    if row.saturated:
        logger.warning(
            "bench %s L=%d saturated: achieved %.1f qps of %.1f requested",
            profile.mode, L, row.qps, profile.request_rate,
        )
    report.add(row)
    return report


def run_sweep(
    base: LoadProfile,
    streams: Mapping[str, Sequence[Event]],
    release: ModelRelease,
    history_lengths: Sequence[int],
    modes: Sequence[str] = ("uic", "recompute"),
) -> BenchReport:
    report = BenchReport()
    for mode in modes:
        for L in history_lengths:
            profile = base.model_copy(update={"mode": mode, "history_len": L})
            report.extend(run_bench(profile, streams, release))
    return report
