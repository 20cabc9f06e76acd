# app/services/data/types.py
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Tuple

Pair = Tuple[str, str]  # (item_id, category_id)


@dataclass(frozen=True)
class Sample:
    user_id: str
    history: Tuple[Pair, ...]
    target: Pair
    label: int
    target_timestamp: int = 0

    def with_target(self, target: Pair, label: int) -> "Sample":
        return Sample(
            user_id=self.user_id,
            history=self.history,
            target=target,
            label=label,
            target_timestamp=self.target_timestamp,
        )


@dataclass
class IngestStats:
    rows_read: int = 0
    rows_malformed: int = 0
    rows_filtered: int = 0  # behavior_type / 除外期間
    missing_category: int = 0
    users_seen: int = 0
    users_dropped: int = 0
    samples: int = 0
    warnings: List[str] = field(default_factory=list)

    def as_dict(self) -> Dict[str, int]:
        return {
            "rows_read": self.rows_read,
            "rows_malformed": self.rows_malformed,
            "rows_filtered": self.rows_filtered,
            "missing_category": self.missing_category,
            "users_seen": self.users_seen,
            "users_dropped": self.users_dropped,
            "samples": self.samples,
        }
