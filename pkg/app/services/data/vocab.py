# app/services/data/vocab.py
from __future__ import annotations

from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from app.core.errors import DataError, UnknownIdError
from app.services.data.types import Pair, Sample
from app.services.mimn.model import SampleBatch

OOV = 0


class Vocabulary:
    """
    item / category の id -> index。index 0 は OOV 用に予約。
    index は登場順に振るので、同じ入力順なら毎回同じになる。
    """

    def __init__(
        self,
        items: Optional[Sequence[str]] = None,
        categories: Optional[Sequence[str]] = None,
        item_category: Optional[Dict[str, str]] = None,
    ):
        self.items: List[str] = []
        self.categories: List[str] = []
        self.item_index: Dict[str, int] = {}
        self.category_index: Dict[str, int] = {}
        self.item_category: Dict[str, str] = {}
        for it in items or ():
            self._add_item(it)
        for c in categories or ():
            self._add_category(c)
        self.item_category.update(item_category or {})

    # -------------------------
    # build
    # -------------------------
    def _add_item(self, item_id: str) -> int:
        idx = self.item_index.get(item_id)
        if idx is None:
            self.items.append(item_id)
            idx = len(self.items)
            self.item_index[item_id] = idx
        return idx

    def _add_category(self, category_id: str) -> int:
        idx = self.category_index.get(category_id)
        if idx is None:
            self.categories.append(category_id)
            idx = len(self.categories)
            self.category_index[category_id] = idx
        return idx

    def add(self, item_id: str, category_id: str) -> None:
        self._add_item(item_id)
        self._add_category(category_id)
        self.item_category.setdefault(item_id, category_id)

    @classmethod
    def from_pairs(cls, pairs: Iterable[Pair]) -> "Vocabulary":
        vocab = cls()
        for item_id, category_id in pairs:
            vocab.add(item_id, category_id)
        return vocab

    @classmethod
    def from_samples(cls, samples: Iterable[Sample]) -> "Vocabulary":
        vocab = cls()
        for s in samples:
            for pair in s.history:
                vocab.add(*pair)
            vocab.add(*s.target)
        return vocab

    # -------------------------
    # lookup
    # -------------------------
    @property
    def n_items(self) -> int:
        return len(self.items) + 1

    @property
    def n_categories(self) -> int:
        return len(self.categories) + 1

    def __len__(self) -> int:
        return len(self.items)

    def item(self, item_id: str, policy: str = "oov") -> int:
        idx = self.item_index.get(item_id)
        if idx is None:
            if policy == "reject":
                raise UnknownIdError(f"unknown item id {item_id!r}")
            return OOV
        return idx

    def category(self, category_id: str, policy: str = "oov") -> int:
        idx = self.category_index.get(category_id)
        if idx is None:
            if policy == "reject":
                raise UnknownIdError(f"unknown category id {category_id!r}")
            return OOV
        return idx

    def encode_pair(self, pair: Pair, policy: str = "oov") -> Tuple[int, int]:
        return self.item(pair[0], policy), self.category(pair[1], policy)

    def encode_history(self, history: Iterable[Pair], policy: str = "oov") -> List[Tuple[int, int]]:
        return [self.encode_pair(p, policy) for p in history]

    def encode_batch(
        self,
        samples: Sequence[Sample],
        profile: Optional[np.ndarray] = None,
        profile_dim: int = 0,
        policy: str = "oov",
    ) -> SampleBatch:
        if not samples:
            raise DataError("cannot encode an empty sample list")
        return SampleBatch.from_indices(
            [self.encode_history(s.history, policy) for s in samples],
            [self.encode_pair(s.target, policy) for s in samples],
            [s.label for s in samples],
            profile=profile,
            profile_dim=profile_dim,
        )

    # -------------------------
    # (de)serialisation
    # -------------------------
    def to_header(self) -> Dict[str, Any]:
        return {
            "items": list(self.items),
            "categories": list(self.categories),
            "item_category": [self.item_category.get(i, "") for i in self.items],
        }

    @classmethod
    def from_header(cls, header: Dict[str, Any]) -> "Vocabulary":
        items = header.get("items") or []
        cats = header.get("item_category") or []
        if len(cats) != len(items):
            raise DataError("vocabulary header: item_category length differs from items")
        mapping = {i: c for i, c in zip(items, cats) if c}
        return cls(items=items, categories=header.get("categories") or [], item_category=mapping)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Vocabulary):
            return NotImplemented
        return (
            self.items == other.items
            and self.categories == other.categories
            and self.item_category == other.item_category
        )
