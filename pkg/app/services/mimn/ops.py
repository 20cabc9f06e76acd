# app/services/mimn/ops.py
"""
MIMN の memory 演算。すべて gradcore の Tape 上で組み立てるので、
学習（記録あり）と serving（記録なし）で同じコードが走る。

shape は先頭に任意の batch 次元を持てる:
  M (..., m, d) / S (..., m, h) / g, w (..., m) / emb, key (..., d)
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict

import numpy as np

from app.services.gradcore.tape import Tape, Tensor

Params = Dict[str, Tensor]


@dataclass
class ControllerOutput:
    k_r: Tensor
    k_w: Tensor
    add: Tensor
    erase: Tensor


@dataclass
class ReadResult:
    w: Tensor
    r: Tensor


# =========================
# controller
# =========================
def _affine(tape: Tape, x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return tape.add(tape.matmul(x, w), b)


def controller_step(tape: Tape, P: Params, emb: Tensor) -> ControllerOutput:
    """emb から4つの head を独立の affine 変換で作る（状態なし）。"""
    return ControllerOutput(
        k_r=_affine(tape, emb, P["ctl_wr"], P["ctl_br"]),
        k_w=_affine(tape, emb, P["ctl_ww"], P["ctl_bw"]),
        add=tape.tanh(_affine(tape, emb, P["ctl_wa"], P["ctl_ba"])),
        erase=tape.sigmoid(_affine(tape, emb, P["ctl_we"], P["ctl_be"])),
    )


# =========================
# NTM read / write
# =========================
def content_weights(tape: Tape, M: Tensor, key: Tensor) -> Tensor:
    return tape.softmax(tape.cosine(key, M), axis=-1)


def memory_read(tape: Tape, M: Tensor, k_r: Tensor) -> ReadResult:
    w = content_weights(tape, M, k_r)
    w_col = tape.slice(w, (Ellipsis, slice(None), None))
    r = tape.reduce_sum(tape.mul(w_col, M), axis=-2)
    return ReadResult(w=w, r=r)


def memory_write(tape: Tape, M: Tensor, w: Tensor, erase: Tensor, add: Tensor) -> Tensor:
    # M' = (1 - w⊗erase) ⊙ M + w⊗add
    keep = tape.sub(1.0, tape.outer(w, erase))
    return tape.add(tape.mul(keep, M), tape.outer(w, add))


def rebalance_write_weight(tape: Tape, w_w: Tensor, g: Tensor, W_g: Tensor) -> Tensor:
    # P = softmax(W_g · g), w̃ = w_w ⊙ P
    P = tape.softmax(tape.matmul(g, W_g, transpose_b=True), axis=-1)
    return tape.mul(w_w, P)


def utilization_reg_loss(tape: Tape, w_sum: Tensor, lam: float) -> Tensor:
    """λ · Σ_i (w_sum(i) − mean(w_sum))²。batch 次元がある場合は行平均。"""
    m = w_sum.shape[-1]
    rows = int(np.prod(w_sum.shape[:-1])) if len(w_sum.shape) > 1 else 1
    mean = tape.mul(tape.reduce_sum(w_sum, axis=-1, keepdims=True), 1.0 / m)
    dev = tape.sub(w_sum, mean)
    total = tape.reduce_sum(tape.mul(dev, dev))
    return tape.mul(total, lam / rows)


# =========================
# memory induction unit
# =========================
def top_k_mask(w_r: np.ndarray, k: int) -> np.ndarray:
    """w_r の上位 k slot を True にする。同値は slot index の小さい方を優先。"""
    order = np.argsort(-w_r, axis=-1, kind="stable")
    mask = np.zeros(w_r.shape, dtype=bool)
    np.put_along_axis(mask, order[..., :k], True, axis=-1)
    return mask


def gru_cell(tape: Tape, P: Params, S: Tensor, x_proj: Tensor, h: int) -> Tensor:
    """x_proj は入力側 projection（bias 込み）。gate 順は r | z | n。"""
    hp = tape.add(tape.matmul(S, P["miu_wh"]), P["miu_bh"])

    def gate(t: Tensor, i: int) -> Tensor:
        return tape.slice(t, (Ellipsis, slice(i * h, (i + 1) * h)))

    r = tape.sigmoid(tape.add(gate(x_proj, 0), gate(hp, 0)))
    z = tape.sigmoid(tape.add(gate(x_proj, 1), gate(hp, 1)))
    n = tape.tanh(tape.add(gate(x_proj, 2), tape.mul(r, gate(hp, 2))))
    # (1 - z) ⊙ n + z ⊙ S
    return tape.add(n, tape.mul(z, tape.sub(S, n)))


def miu_input_projection(tape: Tape, P: Params, M: Tensor, emb: Tensor) -> Tensor:
    """concat(M(i), emb) @ W_x + b_x を slot ごとに計算する。"""
    mem = tape.matmul(M, P["miu_wx_mem"])
    beh = tape.slice(tape.matmul(emb, P["miu_wx_emb"]), (Ellipsis, None, slice(None)))
    return tape.add(tape.add(mem, beh), P["miu_bx"])


def miu_update(
    tape: Tape,
    P: Params,
    S: Tensor,
    M: Tensor,
    w_r: Tensor,
    emb: Tensor,
    k_top: int,
) -> Tensor:
    """read weight 上位 k_top channel の S だけを GRU で更新し、残りはそのままコピーする。"""
    h = S.shape[-1]
    candidate = gru_cell(tape, P, S, miu_input_projection(tape, P, M, emb), h)
    if k_top >= S.shape[-2]:
        return candidate
    mask = top_k_mask(w_r.value, k_top)[..., None]
    return tape.where(mask, candidate, S)
