# app/services/data/synthetic.py
from __future__ import annotations

from typing import Dict, List, Optional, Tuple

import numpy as np

from app.services.data.types import Sample
from app.services.data.vocab import Vocabulary

MARKER_CATEGORY = "c0"
START_TS = 1_500_000_000

Event = Tuple[str, str, int]


def catalog(n_items: int, n_categories: int) -> Vocabulary:
    """item "i{k}" は category "c{k % n_categories}" に属する。"""
    vocab = Vocabulary()
    for k in range(n_items):
        vocab.add(f"i{k}", f"c{k % n_categories}")
    return vocab


def category_probs(n_categories: int, zipf_s: Optional[float] = None) -> np.ndarray:
    if zipf_s is None:
        return np.full(n_categories, 1.0 / n_categories)
    w = 1.0 / np.arange(1, n_categories + 1) ** zipf_s
    return w / w.sum()


def _items_by_category(n_items: int, n_categories: int) -> List[List[str]]:
    out: List[List[str]] = [[] for _ in range(n_categories)]
    for k in range(n_items):
        out[k % n_categories].append(f"i{k}")
    return out


def _draw_pair(rng: np.random.Generator, buckets: List[List[str]], probs: np.ndarray) -> Tuple[str, str]:
    c = int(rng.choice(len(buckets), p=probs))
    items = buckets[c]
    return items[int(rng.integers(len(items)))], f"c{c}"


def marker_task(
    n_samples: int,
    n_items: int = 100,
    n_categories: int = 10,
    min_len: int = 6,
    max_len: int = 8,
    zipf_s: Optional[float] = None,
    seed: int = 0,
) -> Tuple[List[Sample], Vocabulary]:
    """
    label = history に marker category (c0) の item が含まれるか。
    正例と負例がほぼ半々になるように、半分の sample にだけ marker を1件差し込む。
    """
    if n_categories < 2 or n_items < n_categories:
        raise ValueError("marker task needs >= 2 categories and at least one item per category")
    rng = np.random.default_rng(seed)
    buckets = _items_by_category(n_items, n_categories)
    probs = category_probs(n_categories, zipf_s)
    # marker 以外から引くための分布
    plain = probs.copy()
    plain[0] = 0.0
    plain /= plain.sum()

    samples: List[Sample] = []
    for n in range(n_samples):
        length = int(rng.integers(min_len, max_len + 1))
        history = [_draw_pair(rng, buckets, plain) for _ in range(length)]
        label = int(rng.random() < 0.5)
        if label:
            pos = int(rng.integers(length))
            marker_items = buckets[0]
            history[pos] = (marker_items[int(rng.integers(len(marker_items)))], MARKER_CATEGORY)
        target = _draw_pair(rng, buckets, plain)
        samples.append(
            Sample(
                user_id=f"u{n}",
                history=tuple(history),
                target=target,
                label=label,
                target_timestamp=START_TS + n,
            )
        )
    return samples, catalog(n_items, n_categories)


def user_streams(
    n_users: int,
    length: int,
    n_items: int = 200,
    n_categories: int = 20,
    zipf_s: Optional[float] = None,
    seed: int = 0,
) -> Tuple[Dict[str, List[Event]], Vocabulary]:
    """user ごとの時系列イベント列（UIC / bench 用）。"""
    rng = np.random.default_rng(seed)
    buckets = _items_by_category(n_items, n_categories)
    probs = category_probs(n_categories, zipf_s)
    streams: Dict[str, List[Event]] = {}
    for u in range(n_users):
        events: List[Event] = []
        for t in range(length):
            item, cat = _draw_pair(rng, buckets, probs)
            events.append((item, cat, START_TS + t))
        streams[f"u{u}"] = events
    return streams, catalog(n_items, n_categories)
