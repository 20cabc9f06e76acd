# app/services/mimn/state.py
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Tuple

import numpy as np

from app.schemas.config import HyperParams

# M の uniform 初期化の幅
UNIFORM_INIT_SCALE = 0.1


@dataclass(frozen=True)
class UserInterestState:
    """1ユーザー分の固定サイズ状態。履歴長に依存しない。"""

    M: np.ndarray  # (m, d)
    S: np.ndarray  # (m, h)
    g: np.ndarray  # (m,)
    t: int = 0
    version: int = 0

    @property
    def dims(self) -> Tuple[int, int, int]:
        return (int(self.M.shape[0]), int(self.M.shape[1]), int(self.S.shape[1]))

    def matches(self, hyper: HyperParams) -> bool:
        m, d, h = hyper.m, hyper.d, hyper.h
        return self.M.shape == (m, d) and self.S.shape == (m, h) and self.g.shape == (m,)

    def nbytes(self) -> int:
        return int(self.M.nbytes + self.S.nbytes + self.g.nbytes)

    def with_version(self, version: int) -> "UserInterestState":
        return replace(self, version=version)

    def same_as(self, other: "UserInterestState") -> bool:
        """全配列と t / version のビット一致。"""
        return (
            self.t == other.t
            and self.version == other.version
            and np.array_equal(self.M, other.M)
            and np.array_equal(self.S, other.S)
            and np.array_equal(self.g, other.g)
        )


def initial_memory(hyper: HyperParams) -> np.ndarray:
    if hyper.memory_init == "uniform":
        rng = np.random.default_rng(hyper.init_seed)
        return rng.uniform(-UNIFORM_INIT_SCALE, UNIFORM_INIT_SCALE, size=(hyper.m, hyper.d))
    return np.zeros((hyper.m, hyper.d))


def initial_state(hyper: HyperParams, version: int = 0) -> UserInterestState:
    """cold-start 状態。全ユーザー共通。"""
    return UserInterestState(
        M=initial_memory(hyper),
        S=np.zeros((hyper.m, hyper.h)),
        g=np.zeros(hyper.m),
        t=0,
        version=version,
    )


def state_nbytes(hyper: HyperParams) -> int:
    return 8 * (hyper.m * (hyper.d + hyper.h) + hyper.m)


def slot_utilization(g: np.ndarray) -> np.ndarray:
    """slot ごとの書き込み量の割合。g が全 0 のときは一様。"""
    g = np.asarray(g, dtype=np.float64)
    total = g.sum(axis=-1, keepdims=True)
    m = g.shape[-1]
    return np.where(total > 0.0, g / np.where(total > 0.0, total, 1.0), 1.0 / m)
