# app/services/trainer/metrics.py
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
from scipy.stats import rankdata

from app.core.errors import DataError


def auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """
    正例が負例より上に来る確率（同点は 0.5）。
    平均順位を使う Mann-Whitney の式で、総当たりと同じ値になる。
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape:
        raise DataError(f"scores / labels length differ: {s.shape} vs {y.shape}")
    pos = y == 1
    n_pos = int(pos.sum())
    n_neg = int(y.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise DataError("auc needs both positive and negative labels")
    ranks = rankdata(s, method="average")
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def slot_variance(g: np.ndarray) -> float:
    """slot 間の g の分散（sequence 平均）。"""
    g = np.atleast_2d(np.asarray(g, dtype=np.float64))
    if g.size == 0:
        return 0.0
    return float(g.var(axis=-1).mean())


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    lr: float
    seconds: float
    steps: int


@dataclass
class MetricReport:
    auc: Optional[float] = None
    loss_curve: List[float] = field(default_factory=list)
    epoch_seconds: List[float] = field(default_factory=list)
    g_variance: Optional[float] = None
    epochs: List[EpochRecord] = field(default_factory=list)
    steps: int = 0
    model: str = "mimn"

    def add_epoch(self, rec: EpochRecord) -> None:
        self.epochs.append(rec)
        self.loss_curve.append(rec.loss)
        self.epoch_seconds.append(rec.seconds)

    def summary(self) -> Dict[str, Any]:
        return {
            "record": "summary",
            "model": self.model,
            "auc": self.auc,
            "g_variance": self.g_variance,
            "steps": self.steps,
            "final_loss": self.loss_curve[-1] if self.loss_curve else None,
        }

    def to_lines(self) -> List[str]:
        lines = [json.dumps({"record": "epoch", **asdict(e)}) for e in self.epochs]
        lines.append(json.dumps(self.summary()))
        return lines

    def write(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for line in self.to_lines():
                f.write(line + "\n")
