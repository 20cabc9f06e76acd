# app/services/rtp/storage.py
from __future__ import annotations

from typing import Sequence

import pandas as pd

from app.schemas.config import HyperParams
from app.services.mimn.model import process_sequence
from app.services.mimn.state import state_nbytes
from app.services.uic.store import StateStore

# 生の行動ログ1件: item index / category index / timestamp を各 64bit
RAW_EVENT_BYTES = 24


def raw_history_bytes(history_len: int) -> int:
    return RAW_EVENT_BYTES * history_len


def crossover_length(hyper: HyperParams) -> int:
    """状態サイズが生ログより小さくなる最小の履歴長。"""
    return state_nbytes(hyper) // RAW_EVENT_BYTES + 1


def storage_report(store: StateStore, history_lengths: Sequence[int], measure: bool = True) -> pd.DataFrame:
    """
    履歴長ごとの 1 user あたりのバイト数。
    measure=True なら実際にその長さの履歴を流して作った状態のサイズを測る。
    """
    release = store.release
    hyper = release.hyper
    n_items, n_cats = release.params.n_items, release.params.n_categories
    rows = []
    for L in history_lengths:
        if measure and L > 0:
            seq = [(1 + k % max(n_items - 1, 1), 1 + k % max(n_cats - 1, 1)) for k in range(L)]
            state, _ = process_sequence(release.params, hyper, seq)
            state_bytes = state.nbytes()
        else:
            state_bytes = state_nbytes(hyper)
        raw = raw_history_bytes(L)
        rows.append(
            {
                "history_len": int(L),
                "state_bytes": int(state_bytes),
                "raw_history_bytes": raw,
                "state_smaller": state_bytes < raw,
            }
        )
    df = pd.DataFrame(rows, columns=["history_len", "state_bytes", "raw_history_bytes", "state_smaller"])
    df.attrs["crossover_length"] = crossover_length(hyper)
    return df
