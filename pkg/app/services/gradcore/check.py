# app/services/gradcore/check.py
from __future__ import annotations

import logging
from contextlib import contextmanager
from typing import Any, Callable, Dict, Iterator, Mapping, Optional

import numpy as np

from app.services.gradcore.primitives import PRIMITIVES
from app.services.gradcore.tape import FLIPPED_PRIMITIVES, Tape, Tensor, as_arrays

logger = logging.getLogger(__name__)

LossFn = Callable[[Tape, Dict[str, Tensor]], Tensor]

# 相対誤差の分母の下限
REL_FLOOR = 1e-8
# 中心差分の丸め誤差の見積もり: NOISE_ULPS * eps * max(1, |loss|) / step
NOISE_ULPS = 1024.0


def _loss_value(loss_fn: LossFn, arrays: Mapping[str, np.ndarray]) -> float:
    tape = Tape(record=False, check_finite=False)
    bound = tape.bind(arrays)
    return float(loss_fn(tape, bound).value)


def analytic_gradients(loss_fn: LossFn, params: Any) -> Dict[str, np.ndarray]:
    tape = Tape(record=True)
    bound = tape.bind(as_arrays(params))
    loss = loss_fn(tape, bound)
    return dict(tape.backward(loss))


def rounding_floor(loss: float, step: float) -> float:
    """中心差分そのものが持つ丸め誤差の大きさ。これ以下の差は一致とみなす。"""
    return NOISE_ULPS * float(np.finfo(np.float64).eps) * max(1.0, abs(loss)) / (2.0 * step)


def gradient_errors(
    loss_fn: LossFn,
    params: Any,
    step: float = 1e-6,
    max_entries: Optional[int] = None,
    seed: int = 0,
) -> Dict[str, float]:
    """
    parameter ごとに analytic 勾配と中心差分を座標単位で比較し、最大相対誤差を返す。

        err_i = max(|a_i − f_i| − floor, 0) / max(|a_i|, |f_i|, 1e-8)

    floor は rounding_floor()。既定では全座標を調べる。
    max_entries を渡したときだけ parameter ごとに座標を抽出する（seed 固定）。
    """
    if not (0.0 < step <= 1e-3):
        raise ValueError(f"step must be in (0, 1e-3], got {step}")
    if max_entries is not None and max_entries <= 0:
        raise ValueError(f"max_entries must be positive, got {max_entries}")

    arrays = {k: np.array(v, dtype=np.float64, copy=True) for k, v in as_arrays(params).items()}
    analytic = analytic_gradients(loss_fn, arrays)
    floor = rounding_floor(_loss_value(loss_fn, arrays), step)
    rng = np.random.default_rng(seed)

    errors: Dict[str, float] = {}
    for name, arr in arrays.items():
        flat = arr.reshape(-1)
        coords = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            coords = np.sort(rng.choice(flat.size, size=max_entries, replace=False))

        a = analytic[name].reshape(-1)[coords]
        f = np.empty_like(a)
        for j, c in enumerate(coords):
            orig = flat[c]
            flat[c] = orig + step
            up = _loss_value(loss_fn, arrays)
            flat[c] = orig - step
            down = _loss_value(loss_fn, arrays)
            flat[c] = orig
            f[j] = (up - down) / (2.0 * step)

        if a.size == 0:
            errors[name] = 0.0
            continue
        diff = np.maximum(np.abs(a - f) - floor, 0.0)
        rel = diff / np.maximum(np.maximum(np.abs(a), np.abs(f)), REL_FLOOR)
        worst = int(np.argmax(rel))
        errors[name] = float(rel[worst])
        if rel[worst] > 0.0:
            logger.debug(
                "gradient check %s[%d]: analytic %.6e numeric %.6e", name, int(coords[worst]), a[worst], f[worst]
            )
    return errors


def check_gradients(
    loss_fn: LossFn,
    params: Any,
    step: float = 1e-6,
    max_entries: Optional[int] = None,
    seed: int = 0,
) -> float:
    errors = gradient_errors(loss_fn, params, step=step, max_entries=max_entries, seed=seed)
    if not errors:
        return 0.0
    worst = max(errors, key=errors.get)
    logger.debug("gradient check: worst parameter %s (%.3e)", worst, errors[worst])
    return max(errors.values())


@contextmanager
def flipped_backward(kind: str) -> Iterator[None]:
    """
    テスト用: この thread で作る Tape に限り、指定 primitive の backward 符号を反転する。
    他 thread（trainer の worker など）の Tape には影響しない。
    """
    if kind not in PRIMITIVES:
        raise KeyError(f"unknown primitive {kind!r}")
    token = FLIPPED_PRIMITIVES.set(FLIPPED_PRIMITIVES.get() | {kind})
    try:
        yield
    finally:
        FLIPPED_PRIMITIVES.reset(token)
