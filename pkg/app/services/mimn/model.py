# app/services/mimn/model.py
from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from app.core.errors import DataError, ShapeMismatchError, UnknownIdError
from app.schemas.config import HyperParams
from app.services.gradcore.tape import Tape, Tensor
from app.services.mimn import ops
from app.services.mimn.params import ModelParams
from app.services.mimn.state import UserInterestState, initial_memory, initial_state

# log(p) の下限（softmax が 0 に潰れたときの -inf 防止）
PROB_EPS = 1e-12

Params = Dict[str, Tensor]


# =========================
# batch
# =========================
@dataclass
class SampleBatch:
    """index 化済みの padded batch。履歴は左詰め、lengths 以降は padding(0)。"""

    items: np.ndarray  # (B, T) int64
    cats: np.ndarray  # (B, T) int64
    lengths: np.ndarray  # (B,)
    target_item: np.ndarray  # (B,)
    target_cat: np.ndarray  # (B,)
    labels: np.ndarray  # (B,) float64 {0, 1}
    profile: np.ndarray  # (B, p)

    @property
    def size(self) -> int:
        return int(self.items.shape[0])

    @property
    def max_len(self) -> int:
        return int(self.items.shape[1])

    def take(self, rows: Sequence[int]) -> "SampleBatch":
        rows = np.asarray(rows, dtype=np.int64)
        lengths = self.lengths[rows]
        T = int(lengths.max()) if rows.size else 0
        return SampleBatch(
            items=self.items[rows, :T],
            cats=self.cats[rows, :T],
            lengths=lengths,
            target_item=self.target_item[rows],
            target_cat=self.target_cat[rows],
            labels=self.labels[rows],
            profile=self.profile[rows],
        )

    @classmethod
    def from_indices(
        cls,
        histories: Sequence[Sequence[Tuple[int, int]]],
        targets: Sequence[Tuple[int, int]],
        labels: Sequence[int],
        profile: Optional[np.ndarray] = None,
        profile_dim: int = 0,
    ) -> "SampleBatch":
        B = len(histories)
        if B == 0:
            raise DataError("empty batch")
        lengths = np.array([len(h) for h in histories], dtype=np.int64)
        if (lengths < 1).any():
            raise DataError("every history needs at least one event")
        T = int(lengths.max())
        items = np.zeros((B, T), dtype=np.int64)
        cats = np.zeros((B, T), dtype=np.int64)
        for b, hist in enumerate(histories):
            arr = np.asarray(hist, dtype=np.int64).reshape(-1, 2)
            items[b, : len(arr)] = arr[:, 0]
            cats[b, : len(arr)] = arr[:, 1]
        tg = np.asarray(targets, dtype=np.int64).reshape(B, 2)
        if profile is None:
            profile = np.zeros((B, profile_dim))
        return cls(
            items=items,
            cats=cats,
            lengths=lengths,
            target_item=tg[:, 0].copy(),
            target_cat=tg[:, 1].copy(),
            labels=np.asarray(labels, dtype=np.float64),
            profile=np.asarray(profile, dtype=np.float64).reshape(B, -1),
        )


# =========================
# per-event step
# =========================
def embed(tape: Tape, P: Params, item_idx: np.ndarray, cat_idx: np.ndarray) -> Tensor:
    return tape.add(tape.gather(P["item_emb"], item_idx), tape.gather(P["cat_emb"], cat_idx))


def mimn_step(
    tape: Tape,
    P: Params,
    hyper: HyperParams,
    M: Tensor,
    S: Tensor,
    g: Tensor,
    item_idx: np.ndarray,
    cat_idx: np.ndarray,
    active: Optional[np.ndarray] = None,
) -> Tuple[Tensor, Tensor, Tensor, Tensor]:
    """
    1イベント分の更新: embed → controller → read → rebalance → write → accumulate → MIU。
    active が与えられた場合、False の行は状態をそのまま持ち越す（padding 用）。
    戻り値は (M', S', g', w̃)。
    """
    emb = embed(tape, P, item_idx, cat_idx)
    ctl = ops.controller_step(tape, P, emb)
    read = ops.memory_read(tape, M, ctl.k_r)

    w_w = ops.content_weights(tape, M, ctl.k_w)
    if hyper.mur:
        w_t = ops.rebalance_write_weight(tape, w_w, g, P["mur_wg"])
    else:
        w_t = w_w

    M_new = ops.memory_write(tape, M, w_t, ctl.erase, ctl.add)
    if active is not None:
        w_t = tape.where(active[:, None], w_t, 0.0)
    g_new = tape.add(g, w_t)

    if hyper.miu:
        S_new = ops.miu_update(tape, P, S, M_new, read.w, emb, hyper.k_top)
    else:
        S_new = S

    if active is not None:
        M_new = tape.where(active[:, None, None], M_new, M)
        if hyper.miu:
            S_new = tape.where(active[:, None, None], S_new, S)
    return M_new, S_new, g_new, w_t


def _initial_tensors(tape: Tape, hyper: HyperParams, B: int) -> Tuple[Tensor, Tensor, Tensor]:
    M0 = np.broadcast_to(initial_memory(hyper), (B, hyper.m, hyper.d)).copy()
    return (
        tape.constant(M0),
        tape.constant(np.zeros((B, hyper.m, hyper.h))),
        tape.constant(np.zeros((B, hyper.m))),
    )


def run_sequences(
    tape: Tape, P: Params, hyper: HyperParams, batch: SampleBatch
) -> Tuple[Tensor, Tensor, Tensor, Tensor]:
    """padded batch を cold-start から最後まで流す。(M, S, g, w̃_sum) を返す。"""
    B, T = batch.size, batch.max_len
    M, S, g = _initial_tensors(tape, hyper, B)
    w_sum: Tensor = tape.constant(np.zeros((B, hyper.m)))
    for t in range(T):
        act = batch.lengths > t
        mask = None if act.all() else act
        M, S, g, w_t = mimn_step(tape, P, hyper, M, S, g, batch.items[:, t], batch.cats[:, t], mask)
        w_sum = tape.add(w_sum, w_t)
    return M, S, g, w_sum


# =========================
# prediction head
# =========================
def mlp_head(tape: Tape, P: Params, feats: Tensor, n_layers: int) -> Tensor:
    """ReLU 隠れ層 + 2-way softmax。(..., 2) を返す。"""
    x = feats
    for i in range(n_layers):
        x = tape.add(tape.matmul(x, P[f"mlp_w{i}"]), P[f"mlp_b{i}"])
        if i < n_layers - 1:
            x = tape.relu(x)
    return tape.softmax(x, axis=-1)


def predict_probs(
    tape: Tape,
    P: Params,
    hyper: HyperParams,
    M: Tensor,
    S: Tensor,
    target_item: np.ndarray,
    target_cat: np.ndarray,
    profile: Optional[np.ndarray],
) -> Tensor:
    parts: List[Any] = [
        tape.reduce_sum(M, axis=-2),
        tape.reduce_sum(S, axis=-2),
        tape.gather(P["item_emb"], target_item),
        tape.gather(P["cat_emb"], target_cat),
    ]
    if hyper.profile_dim:
        parts.append(tape.constant(profile))
    feats = tape.concat(parts, axis=-1)
    return mlp_head(tape, P, feats, len(hyper.mlp_widths))


def _click_column(tape: Tape, probs: Tensor) -> Tensor:
    return tape.slice(probs, (Ellipsis, 1))


# =========================
# loss
# =========================
def build_loss(
    tape: Tape, P: Params, hyper: HyperParams, batch: SampleBatch
) -> Tuple[Tensor, Dict[str, np.ndarray]]:
    """平均 cross-entropy + batch 平均の utilization 正則化。"""
    M, S, g, w_sum = run_sequences(tape, P, hyper, batch)
    probs = predict_probs(tape, P, hyper, M, S, batch.target_item, batch.target_cat, batch.profile)

    y = batch.labels
    onehot = np.stack([1.0 - y, y], axis=-1)
    log_p = tape.log(tape.add(probs, PROB_EPS))
    loss = tape.mul(tape.reduce_sum(tape.mul(log_p, onehot)), -1.0 / batch.size)

    if hyper.mur and hyper.lam > 0.0:
        loss = tape.add(loss, ops.utilization_reg_loss(tape, w_sum, hyper.lam))

    aux = {"p": probs.value[:, 1], "g": g.value, "w_sum": w_sum.value}
    return loss, aux


def training_loss(params: ModelParams, hyper: HyperParams, batch: SampleBatch) -> float:
    tape = Tape(record=False, check_finite=False)
    loss, _ = build_loss(tape, tape.bind(params), hyper, batch)
    return float(loss.value)


def score_batch(params: ModelParams, hyper: HyperParams, batch: SampleBatch) -> np.ndarray:
    tape = Tape(record=False, check_finite=False)
    P = tape.bind(params)
    M, S, _, _ = run_sequences(tape, P, hyper, batch)
    probs = predict_probs(tape, P, hyper, M, S, batch.target_item, batch.target_cat, batch.profile)
    return probs.value[:, 1].copy()


def final_utilization(params: ModelParams, hyper: HyperParams, batch: SampleBatch) -> np.ndarray:
    """各 sequence 終了時点の g (B, m)。"""
    tape = Tape(record=False, check_finite=False)
    _, _, g, _ = run_sequences(tape, tape.bind(params), hyper, batch)
    return g.value.copy()


# =========================
# single-user path (UIC / serving)
# =========================
def resolve_index(idx: int, size: int, policy: str, what: str) -> int:
    if 0 <= idx < size:
        return int(idx)
    if policy == "reject":
        raise UnknownIdError(f"{what} index {idx} outside vocabulary of size {size}")
    return 0


def process_sequence(
    params: ModelParams,
    hyper: HyperParams,
    behavior_seq: Sequence[Tuple[int, int]],
    state: Optional[UserInterestState] = None,
) -> Tuple[UserInterestState, np.ndarray]:
    """
    state（省略時は cold start）から behavior_seq を1イベントずつ流す。
    途中で区切って再開しても結果はビット一致する。
    """
    if len(behavior_seq) == 0:
        raise DataError("process_sequence needs at least one event")
    if state is None:
        state = initial_state(hyper, params.version)
    elif not state.matches(hyper):
        raise ShapeMismatchError("process_sequence", state.M.shape, state.S.shape, detail=f"hyper dims {hyper.dims()}")

    n_items, n_cats = params.n_items, params.n_categories
    policy = hyper.unknown_id_policy
    tape = Tape(record=False, check_finite=False)
    P = tape.bind(params)
    M = tape.constant(state.M[None])
    S = tape.constant(state.S[None])
    g = tape.constant(state.g[None])
    w_sum = np.zeros(hyper.m)
    for item, cat in behavior_seq:
        i = np.array([resolve_index(item, n_items, policy, "item")])
        c = np.array([resolve_index(cat, n_cats, policy, "category")])
        M, S, g, w_t = mimn_step(tape, P, hyper, M, S, g, i, c)
        w_sum = w_sum + w_t.value[0]

    new_state = UserInterestState(
        M=M.value[0].copy(),
        S=S.value[0].copy(),
        g=g.value[0].copy(),
        t=state.t + len(behavior_seq),
        version=params.version,
    )
    return new_state, w_sum


def predict(
    params: ModelParams,
    state: UserInterestState,
    target_item: int,
    target_category: int,
    profile_feats: Optional[np.ndarray] = None,
    hyper: Optional[HyperParams] = None,
) -> float:
    """右側 sub-network のみ。履歴には触れない。"""
    if hyper is None:
        hyper = hyper_from_params(params, state)
    if not state.matches(hyper):
        raise ShapeMismatchError("predict", state.M.shape, state.S.shape, detail=f"hyper dims {hyper.dims()}")
    policy = hyper.unknown_id_policy
    ti = np.array([resolve_index(target_item, params.n_items, policy, "item")])
    tc = np.array([resolve_index(target_category, params.n_categories, policy, "category")])
    profile = None
    if hyper.profile_dim:
        profile = np.asarray(profile_feats if profile_feats is not None else np.zeros(hyper.profile_dim), dtype=np.float64)
        if profile.shape != (hyper.profile_dim,):
            raise ShapeMismatchError("predict", profile.shape, (hyper.profile_dim,), detail="profile features")
        profile = profile[None]

    tape = Tape(record=False, check_finite=False)
    P = tape.bind(params)
    probs = predict_probs(tape, P, hyper, tape.constant(state.M[None]), tape.constant(state.S[None]), ti, tc, profile)
    return float(probs.value[0, 1])


def hyper_from_params(params: ModelParams, state: UserInterestState) -> HyperParams:
    """hyper が渡されない場合に parameter / state の shape から復元する。"""
    m, d, h = state.dims
    widths = []
    i = 0
    while f"mlp_w{i}" in params.tensors:
        widths.append(int(params.tensors[f"mlp_w{i}"].shape[1]))
        i += 1
    in_width = int(params.tensors["mlp_w0"].shape[0])
    return HyperParams(m=m, d=d, h=h, k_top=1, mlp_widths=widths, profile_dim=max(in_width - 3 * d - h, 0))
