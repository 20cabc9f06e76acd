# app/services/data/sampling.py
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from app.core.errors import DataError
from app.services.data.types import Sample
from app.services.data.vocab import Vocabulary

# rejection sampling を諦めて候補列挙に切り替えるまでの試行回数
_MAX_REJECTIONS = 64


def negative_sample(samples: Sequence[Sample], vocab: Vocabulary, seed: int) -> List[Sample]:
    """
    正例ごとに同じ history の負例を1件作る（正例, 負例 の順に並べる）。
    負例 item は vocabulary から一様に、history と正例 target を除いて選ぶ。
    """
    if len(vocab) == 0:
        raise DataError("negative sampling needs a nonempty item vocabulary")
    rng = np.random.default_rng(seed)
    n = len(vocab.items)

    out: List[Sample] = []
    for s in samples:
        if s.label != 1:
            continue
        excluded = {i for i, _ in s.history}
        excluded.add(s.target[0])
        if n <= len(excluded & vocab.item_index.keys()):
            raise DataError(
                f"user {s.user_id!r}: item vocabulary ({n}) too small to draw a negative outside the history"
            )

        item = None
        for _ in range(_MAX_REJECTIONS):
            cand = vocab.items[int(rng.integers(n))]
            if cand not in excluded:
                item = cand
                break
        if item is None:
            pool = [i for i in vocab.items if i not in excluded]
            item = pool[int(rng.integers(len(pool)))]

        out.append(s)
        out.append(s.with_target((item, vocab.item_category.get(item, "")), label=0))
    return out


# =========================
# split
# =========================
@dataclass(frozen=True)
class SplitPolicy:
    kind: str = "user_hash"  # user_hash | time_cutoff
    test_fraction: float = 0.2
    seed: int = 0
    cutoff: Optional[int] = None


def user_bucket(user_id: str, seed: int) -> float:
    """user を [0, 1) に写す。実行環境によらず固定。"""
    digest = hashlib.blake2b(f"{seed}:{user_id}".encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "big") / 2.0**64


def split(samples: Sequence[Sample], policy: SplitPolicy) -> Tuple[List[Sample], List[Sample]]:
    if policy.kind == "user_hash":
        if not (0.0 < policy.test_fraction < 1.0):
            raise DataError(f"test_fraction must be in (0, 1), got {policy.test_fraction}")
        is_test = [user_bucket(s.user_id, policy.seed) < policy.test_fraction for s in samples]
    elif policy.kind == "time_cutoff":
        if policy.cutoff is None:
            raise DataError("time_cutoff split needs a cutoff timestamp")
        is_test = [s.target_timestamp >= policy.cutoff for s in samples]
    else:
        raise DataError(f"unknown split policy: {policy.kind!r}")

    train = [s for s, t in zip(samples, is_test) if not t]
    test = [s for s, t in zip(samples, is_test) if t]
    return train, test
