# app/services/trainer/models.py
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict

from app.services.mimn import baseline, model
from app.services.mimn.params import init_mimn_params


@dataclass(frozen=True)
class CtrModel:
    kind: str
    init_params: Callable  # (hyper, n_items, n_categories, seed) -> ModelParams
    build_loss: Callable  # (tape, bound, hyper, batch) -> (loss, aux)
    score: Callable  # (params, hyper, batch) -> np.ndarray
    has_memory: bool


MODELS: Dict[str, CtrModel] = {
    "mimn": CtrModel("mimn", init_mimn_params, model.build_loss, model.score_batch, True),
    "embedding_mlp": CtrModel(
        "embedding_mlp",
        baseline.init_baseline_params,
        baseline.build_baseline_loss,
        baseline.score_baseline,
        False,
    ),
}


def get_model(kind: str) -> CtrModel:
    try:
        return MODELS[kind]
    except KeyError:
        raise ValueError(f"unknown model kind {kind!r} (expected one of {sorted(MODELS)})") from None
