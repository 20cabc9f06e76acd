# app/services/trainer/optimizer.py
from __future__ import annotations

from typing import Dict, Mapping

import numpy as np

from app.services.mimn.params import ModelParams


def decayed_lr(lr0: float, decay_rate: float, decay_interval: int, step: int) -> float:
    """lr0 · decay_rate^(step // decay_interval)"""
    return lr0 * decay_rate ** (step // decay_interval)


class Adam:
    def __init__(
        self,
        params: ModelParams,
        lr0: float,
        decay_rate: float = 1.0,
        decay_interval: int = 1,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        if decay_interval < 1:
            raise ValueError("decay_interval must be >= 1")
        self.lr0 = lr0
        self.decay_rate = decay_rate
        self.decay_interval = decay_interval
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.steps = 0
        self.m: Dict[str, np.ndarray] = {k: np.zeros_like(v) for k, v in params.items()}
        self.v: Dict[str, np.ndarray] = {k: np.zeros_like(v) for k, v in params.items()}

    @property
    def lr(self) -> float:
        return decayed_lr(self.lr0, self.decay_rate, self.decay_interval, self.steps)

    def step(self, params: ModelParams, grads: Mapping[str, np.ndarray]) -> float:
        """params を in-place で更新し、使った lr を返す。"""
        lr = self.lr
        self.steps += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.steps
        c2 = 1.0 - b2 ** self.steps
        for name, g in grads.items():
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            params.tensors[name] -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return lr
