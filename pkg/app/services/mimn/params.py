# app/services/mimn/params.py
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Iterator, Tuple

import numpy as np

from app.schemas.config import HyperParams


@dataclass
class ModelParams:
    """学習対象の全 tensor（名前 -> float64 配列）と parameter version。"""

    tensors: Dict[str, np.ndarray]
    version: int = 0
    kind: str = "mimn"
    meta: Dict[str, str] = field(default_factory=dict)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def items(self):
        return self.tensors.items()

    @property
    def n_items(self) -> int:
        return int(self.tensors["item_emb"].shape[0])

    @property
    def n_categories(self) -> int:
        return int(self.tensors["cat_emb"].shape[0])

    def shapes(self) -> Dict[str, Tuple[int, ...]]:
        return {k: tuple(v.shape) for k, v in self.tensors.items()}

    def copy(self, version: int | None = None) -> "ModelParams":
        return ModelParams(
            tensors={k: v.copy() for k, v in self.tensors.items()},
            version=self.version if version is None else version,
            kind=self.kind,
            meta=dict(self.meta),
        )

    def all_finite(self) -> bool:
        return all(bool(np.isfinite(v).all()) for v in self.tensors.values())

    def equals(self, other: "ModelParams") -> bool:
        if self.tensors.keys() != other.tensors.keys():
            return False
        return all(np.array_equal(v, other.tensors[k]) for k, v in self.tensors.items())


# =========================
# initialisation
# =========================
def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def mlp_input_width(hyper: HyperParams) -> int:
    # sum(M) | sum(S) | target item | target category | profile
    return hyper.d + hyper.h + 2 * hyper.d + hyper.profile_dim


def init_mlp(rng: np.random.Generator, in_width: int, widths, out: Dict[str, np.ndarray]) -> None:
    prev = in_width
    for i, w in enumerate(widths):
        out[f"mlp_w{i}"] = _glorot(rng, prev, w)
        out[f"mlp_b{i}"] = np.zeros(w)
        prev = w


def init_embeddings(
    rng: np.random.Generator, n_items: int, n_categories: int, d: int, out: Dict[str, np.ndarray]
) -> None:
    if n_items < 1 or n_categories < 1:
        raise ValueError("embedding tables need at least the OOV row")
    out["item_emb"] = rng.normal(0.0, 0.1, size=(n_items, d))
    out["cat_emb"] = rng.normal(0.0, 0.1, size=(n_categories, d))


def init_mimn_params(hyper: HyperParams, n_items: int, n_categories: int, seed: int = 0) -> ModelParams:
    """
    MIMN の parameter を初期化する。
    n_items / n_categories は OOV(0) を含む vocabulary サイズ。
    """
    rng = np.random.default_rng(seed)
    m, d, h = hyper.m, hyper.d, hyper.h
    t: Dict[str, np.ndarray] = {}

    init_embeddings(rng, n_items, n_categories, d, t)

    # controller: emb -> read key / write key / add / erase
    for head in ("r", "w", "a", "e"):
        t[f"ctl_w{head}"] = _glorot(rng, d, d)
        t[f"ctl_b{head}"] = np.zeros(d)

    t["mur_wg"] = rng.normal(0.0, 0.1, size=(m, m))

    # MIU GRU（全 channel 共有）。入力 concat(M(i), emb) の projection を2ブロックで持つ
    t["miu_wx_mem"] = _glorot(rng, d, 3 * h)
    t["miu_wx_emb"] = _glorot(rng, d, 3 * h)
    t["miu_wh"] = _glorot(rng, h, 3 * h)
    t["miu_bx"] = np.zeros(3 * h)
    t["miu_bh"] = np.zeros(3 * h)

    init_mlp(rng, mlp_input_width(hyper), hyper.mlp_widths, t)
    return ModelParams(tensors=t, version=0, kind="mimn")
