# app/services/mimn/baseline.py
"""Embedding&MLP: 履歴 embedding を sum pooling して MIMN と同じ MLP に入れる比較用モデル。"""
from __future__ import annotations

from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from app.schemas.config import HyperParams
from app.services.gradcore.tape import Tape, Tensor
from app.services.mimn.model import PROB_EPS, SampleBatch, embed, mlp_head
from app.services.mimn.params import ModelParams, init_embeddings, init_mlp

Params = Dict[str, Tensor]


def baseline_input_width(hyper: HyperParams) -> int:
    # pooled history | target item | target category | profile
    return 3 * hyper.d + hyper.profile_dim


def init_baseline_params(hyper: HyperParams, n_items: int, n_categories: int, seed: int = 0) -> ModelParams:
    rng = np.random.default_rng(seed)
    t: Dict[str, np.ndarray] = {}
    init_embeddings(rng, n_items, n_categories, hyper.d, t)
    init_mlp(rng, baseline_input_width(hyper), hyper.mlp_widths, t)
    return ModelParams(tensors=t, version=0, kind="embedding_mlp")


def baseline_probs(tape: Tape, P: Params, hyper: HyperParams, batch: SampleBatch) -> Tensor:
    hist = embed(tape, P, batch.items, batch.cats)  # (B, T, d)
    valid = (np.arange(batch.max_len)[None, :] < batch.lengths[:, None]).astype(np.float64)
    pooled = tape.reduce_sum(tape.mul(hist, valid[..., None]), axis=1)
    parts = [
        pooled,
        tape.gather(P["item_emb"], batch.target_item),
        tape.gather(P["cat_emb"], batch.target_cat),
    ]
    if hyper.profile_dim:
        parts.append(tape.constant(batch.profile))
    return mlp_head(tape, P, tape.concat(parts, axis=-1), len(hyper.mlp_widths))


def build_baseline_loss(
    tape: Tape, P: Params, hyper: HyperParams, batch: SampleBatch
) -> Tuple[Tensor, Dict[str, np.ndarray]]:
    probs = baseline_probs(tape, P, hyper, batch)
    y = batch.labels
    onehot = np.stack([1.0 - y, y], axis=-1)
    log_p = tape.log(tape.add(probs, PROB_EPS))
    loss = tape.mul(tape.reduce_sum(tape.mul(log_p, onehot)), -1.0 / batch.size)
    return loss, {"p": probs.value[:, 1]}


def score_baseline(params: ModelParams, hyper: HyperParams, batch: SampleBatch) -> np.ndarray:
    tape = Tape(record=False, check_finite=False)
    probs = baseline_probs(tape, tape.bind(params), hyper, batch)
    return probs.value[:, 1].copy()


def embedding_mlp_baseline(
    params: ModelParams,
    hyper: HyperParams,
    history: Sequence[Tuple[int, int]],
    target: Tuple[int, int],
    profile_feats: Optional[np.ndarray] = None,
) -> float:
    profile = None
    if hyper.profile_dim:
        profile = np.asarray(profile_feats if profile_feats is not None else np.zeros(hyper.profile_dim))[None]
    batch = SampleBatch.from_indices([history], [target], [0], profile=profile, profile_dim=hyper.profile_dim)
    return float(score_baseline(params, hyper, batch)[0])
