# app/services/data/ingest.py
"""
行動ログ（Amazon reviews / Taobao UserBehavior）から Sample を作る。

- user ごとに timestamp 昇順（同時刻はファイル順）
- 連続する同一 item は1件にまとめる
- 最後のイベントを target（正例）、その直前 max_len 件を history
- イベント数が min_len 未満の user は捨てる
"""
from __future__ import annotations

import ast
import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from app.core.errors import DataError
from app.services.data.types import IngestStats, Sample
from app.services.data.vocab import Vocabulary

logger = logging.getLogger(__name__)

EVENT_COLUMNS = ["user_id", "item_id", "category_id", "timestamp"]
TAOBAO_COLUMNS = ["user_id", "item_id", "category_id", "behavior_type", "timestamp"]
TAOBAO_CLICK_TYPES = {"pv", "click"}
UNKNOWN_CATEGORY = "unknown"

# (start, end) の半開区間
TimeRange = Tuple[int, int]


# =========================
# readers
# =========================
def _parse_record(line: str) -> Optional[Dict[str, Any]]:
    line = line.strip()
    if not line:
        return None
    try:
        rec = json.loads(line)
    except ValueError:
        # 古い dump は python の dict リテラル
        try:
            rec = ast.literal_eval(line)
        except (ValueError, SyntaxError):
            return None
    return rec if isinstance(rec, dict) else None


def read_amazon_meta(meta_path: Path) -> Dict[str, str]:
    """asin -> category（最初の category path の末尾）"""
    out: Dict[str, str] = {}
    with open(meta_path, "r", encoding="utf-8") as f:
        for line in f:
            rec = _parse_record(line)
            if not rec or "asin" not in rec:
                continue
            paths = rec.get("categories") or rec.get("category") or []
            cat = ""
            if paths and isinstance(paths[0], (list, tuple)):
                cat = str(paths[0][-1]) if paths[0] else ""
            elif paths:
                cat = str(paths[-1])
            if cat:
                out[str(rec["asin"])] = cat
    return out


def read_amazon(path: Path, meta_path: Optional[Path], stats: IngestStats) -> pd.DataFrame:
    categories = read_amazon_meta(meta_path) if meta_path else {}
    rows: List[Tuple[str, str, str, int]] = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            if not line.strip():
                continue
            stats.rows_read += 1
            rec = _parse_record(line)
            try:
                user = str(rec["reviewerID"]).strip()
                asin = str(rec["asin"]).strip()
                ts = int(rec["unixReviewTime"])
            except (TypeError, KeyError, ValueError):
                stats.rows_malformed += 1
                continue
            if not user or not asin or ts < 0:
                stats.rows_malformed += 1
                continue
            cat = categories.get(asin) or str(rec.get("category") or "")
            if not cat:
                stats.missing_category += 1
                cat = UNKNOWN_CATEGORY
            rows.append((user, asin, cat, ts))
    return pd.DataFrame(rows, columns=EVENT_COLUMNS)


def read_taobao(path: Path, stats: IngestStats) -> pd.DataFrame:
    bad: List[List[str]] = []

    def _bad_line(fields: List[str]) -> None:
        bad.append(fields)
        return None

    df = pd.read_csv(
        path,
        header=None,
        names=TAOBAO_COLUMNS,
        dtype=str,
        keep_default_na=False,
        engine="python",
        on_bad_lines=_bad_line,
    )
    # header 行があれば読み飛ばす
    if len(df) and df.iloc[0]["timestamp"].strip().lower() == "timestamp":
        df = df.iloc[1:]

    stats.rows_read += len(df) + len(bad)
    stats.rows_malformed += len(bad)

    for col in TAOBAO_COLUMNS:
        df[col] = df[col].astype(str).str.strip()
    ts = pd.to_numeric(df["timestamp"], errors="coerce")
    ok = ts.notna() & (ts >= 0)
    for col in ("user_id", "item_id", "category_id", "behavior_type"):
        ok &= df[col] != ""
    stats.rows_malformed += int((~ok).sum())
    df = df[ok].assign(timestamp=ts[ok].astype(np.int64))

    clicks = df["behavior_type"].str.lower().isin(TAOBAO_CLICK_TYPES)
    stats.rows_filtered += int((~clicks).sum())
    return df.loc[clicks, EVENT_COLUMNS].reset_index(drop=True)


def read_events(path: Path, fmt: str, meta_path: Optional[Path] = None, stats: Optional[IngestStats] = None) -> pd.DataFrame:
    stats = stats if stats is not None else IngestStats()
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"input file not found: {path}")
    if fmt == "amazon":
        return read_amazon(path, Path(meta_path) if meta_path else None, stats)
    if fmt == "taobao":
        return read_taobao(path, stats)
    raise DataError(f"unknown format: {fmt!r} (expected amazon or taobao)")


# =========================
# sequence construction
# =========================
def exclude_periods(df: pd.DataFrame, ranges: Sequence[TimeRange], stats: IngestStats) -> pd.DataFrame:
    """大型セール期間などのイベントを落とす。"""
    if not len(ranges) or df.empty:
        return df
    drop = np.zeros(len(df), dtype=bool)
    ts = df["timestamp"].to_numpy()
    for start, end in ranges:
        drop |= (ts >= start) & (ts < end)
    stats.rows_filtered += int(drop.sum())
    return df.loc[~drop]


def user_sequences(df: pd.DataFrame) -> Dict[str, List[Tuple[str, str, int]]]:
    """user -> [(item, category, timestamp)]。同時刻はファイル順。"""
    df = df.assign(_order=np.arange(len(df)))
    df = df.sort_values(["timestamp", "_order"], kind="mergesort")
    out: Dict[str, List[Tuple[str, str, int]]] = {}
    for user, grp in df.groupby("user_id", sort=False):
        seq: List[Tuple[str, str, int]] = []
        for item, cat, ts in zip(grp["item_id"], grp["category_id"], grp["timestamp"]):
            if seq and seq[-1][0] == item:
                continue
            seq.append((str(item), str(cat), int(ts)))
        out[str(user)] = seq
    return out


def build_samples(
    df: pd.DataFrame,
    min_len: int,
    max_len: int,
    stats: Optional[IngestStats] = None,
) -> List[Sample]:
    if min_len < 2:
        raise DataError("min_len must be >= 2 (history plus target)")
    if max_len < 1:
        raise DataError("max_len must be positive")
    stats = stats if stats is not None else IngestStats()

    samples: List[Sample] = []
    seqs = user_sequences(df)
    stats.users_seen += len(seqs)
    for user, seq in seqs.items():
        if len(seq) < min_len:
            stats.users_dropped += 1
            continue
        history = tuple((i, c) for i, c, _ in seq[:-1][-max_len:])
        item, cat, ts = seq[-1]
        samples.append(Sample(user_id=user, history=history, target=(item, cat), label=1, target_timestamp=ts))
    stats.samples += len(samples)
    return samples


def ingest(
    path: Path,
    fmt: str,
    min_len: int,
    max_len: int,
    meta_path: Optional[Path] = None,
    exclude_ranges: Sequence[TimeRange] = (),
) -> Tuple[List[Sample], Vocabulary, IngestStats]:
    stats = IngestStats()
    df = read_events(path, fmt, meta_path=meta_path, stats=stats)
    df = exclude_periods(df, exclude_ranges, stats)
    samples = build_samples(df, min_len, max_len, stats)

    if stats.rows_malformed:
        logger.warning("skipped %d malformed rows in %s", stats.rows_malformed, path)
    logger.info(
        "ingest %s: rows=%d users=%d dropped=%d samples=%d",
        fmt, stats.rows_read, stats.users_seen, stats.users_dropped, stats.samples,
    )
    if not samples:
        raise DataError(f"no samples produced from {path} (min_len={min_len}, rows={stats.rows_read})")
    return samples, Vocabulary.from_samples(samples), stats


def events_by_user(path: Path, fmt: str, meta_path: Optional[Path] = None) -> Dict[str, List[Tuple[str, str, int]]]:
    """warm-up / serve-sim 用: user ごとの時系列イベント（min_len 等のフィルタなし）。"""
    stats = IngestStats()
    df = read_events(path, fmt, meta_path=meta_path, stats=stats)
    if stats.rows_malformed:
        logger.warning("skipped %d malformed rows in %s", stats.rows_malformed, path)
    return user_sequences(df)
