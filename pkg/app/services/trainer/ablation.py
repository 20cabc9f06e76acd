# app/services/trainer/ablation.py
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from app.schemas.config import TrainConfig
from app.services.data.types import Sample
from app.services.data.vocab import Vocabulary
from app.services.trainer.metrics import MetricReport
from app.services.trainer.train import evaluate, train

logger = logging.getLogger(__name__)

REPEATS = 3


@dataclass(frozen=True)
class AblationCell:
    name: str
    model: str = "mimn"
    hyper: Dict[str, Any] = field(default_factory=dict)


def slot_grid(slots: Sequence[int] = (4, 6, 8)) -> List[AblationCell]:
    """slot 数 sweep（MUR / MIU なしの素の NTM）"""
    return [AblationCell(f"ntm_m{m}", hyper={"m": m, "mur": False, "miu": False}) for m in slots]


def component_grid() -> List[AblationCell]:
    return [
        AblationCell("mimn_base", hyper={"mur": False, "miu": False}),
        AblationCell("mimn_mur", hyper={"mur": True, "miu": False}),
        AblationCell("mimn_mur_miu", hyper={"mur": True, "miu": True}),
    ]


def model_grid() -> List[AblationCell]:
    return [AblationCell("embedding_mlp", model="embedding_mlp"), AblationCell("mimn")]


GRIDS: Dict[str, Callable[[], List[AblationCell]]] = {
    "slots": slot_grid,
    "components": component_grid,
    "models": model_grid,
}


def cell_config(base: TrainConfig, cell: AblationCell, seed: int) -> TrainConfig:
    hyper = base.hyper.model_dump(by_alias=True)
    hyper.update(cell.hyper)
    if hyper["k_top"] > hyper["m"]:
        hyper["k_top"] = hyper["m"]
    data = base.model_dump()
    data.update({"model": cell.model, "seed": seed, "hyper": hyper})
    return TrainConfig.model_validate(data)


def mean_std(values: Sequence[float]) -> tuple:
    arr = np.asarray(values, dtype=np.float64)
    std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    return float(arr.mean()), std


def run_ablation(
    grid: Sequence[AblationCell],
    base: TrainConfig,
    train_samples: Sequence[Sample],
    test_samples: Sequence[Sample],
    vocab: Vocabulary,
    repeats: int = REPEATS,
    runner: Optional[Callable[[TrainConfig], MetricReport]] = None,
) -> pd.DataFrame:
    """
    各 cell を seed を変えて repeats 回学習し、AUC の mean / std を1行にまとめる。
    runner を差し替えるとテストで学習を省略できる。
    """
    if runner is None:
        def runner(cfg: TrainConfig) -> MetricReport:
            params, _ = train(cfg, train_samples, vocab)
            return evaluate(params, cfg.hyper, test_samples, vocab, cfg.model)

    rows: List[Dict[str, Any]] = []
    for cell in grid:
        reports: List[MetricReport] = []
        for r in range(repeats):
            cfg = cell_config(base, cell, base.seed + r)
            rep = runner(cfg)
            logger.info("ablation %s seed=%d auc=%.4f", cell.name, cfg.seed, rep.auc or float("nan"))
            reports.append(rep)

        aucs = [rep.auc for rep in reports]
        auc_mean, auc_std = mean_std(aucs)
        gvars = [rep.g_variance for rep in reports if rep.g_variance is not None]
        row: Dict[str, Any] = {
            "cell": cell.name,
            "model": cell.model,
            "runs": len(reports),
            "auc_mean": auc_mean,
            "auc_std": auc_std,
            "auc": f"{auc_mean:.4f} ± {auc_std:.4f}",
            "g_variance": float(np.mean(gvars)) if gvars else None,
        }
        row.update({f"hyper.{k}": v for k, v in cell.hyper.items()})
        rows.append(row)
    return pd.DataFrame(rows)
