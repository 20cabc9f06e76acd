# app/services/gradcore/primitives.py
from __future__ import annotations

from typing import Any, Dict, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit

from app.core.errors import ShapeMismatchError

# cosine の分母に足す値（ゼロノルムの slot / key 対策）
COSINE_EPS = 1e-8

Grads = Tuple[Optional[np.ndarray], ...]


# =========================
# helpers
# =========================
def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """broadcast された勾配を元の shape に畳み込む。"""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(op: str, a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatchError(op, a.shape, b.shape, detail="not broadcastable") from None


def _safe_unit(x: np.ndarray, norm: np.ndarray) -> np.ndarray:
    # x (..., d), norm (...)。norm == 0 の行は 0 ベクトル扱い
    denom = np.where(norm > 0.0, norm, 1.0)
    return x / denom[..., None]


def _has_array_index(key: Any) -> bool:
    parts = key if isinstance(key, tuple) else (key,)
    return any(isinstance(p, (np.ndarray, list)) for p in parts)


# =========================
# primitive base
# =========================
class Primitive:
    name = ""

    def check(self, *xs: np.ndarray, **attrs: Any) -> None:
        return None

    def forward(self, *xs: np.ndarray, **attrs: Any) -> np.ndarray:
        raise NotImplementedError

    def backward(self, g: np.ndarray, y: np.ndarray, *xs: np.ndarray, **attrs: Any) -> Grads:
        raise NotImplementedError

    def vjp(self, g: np.ndarray, y: np.ndarray, *xs: np.ndarray, **attrs: Any) -> Grads:
        return self.backward(g, y, *xs, **attrs)


# =========================
# elementwise
# =========================
class Add(Primitive):
    name = "add"

    def check(self, a, b, **attrs):
        _broadcast_shape(self.name, a, b)

    def forward(self, a, b):
        return a + b

    def backward(self, g, y, a, b):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


class Sub(Primitive):
    name = "sub"

    def check(self, a, b, **attrs):
        _broadcast_shape(self.name, a, b)

    def forward(self, a, b):
        return a - b

    def backward(self, g, y, a, b):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)


class Mul(Primitive):
    name = "mul"

    def check(self, a, b, **attrs):
        _broadcast_shape(self.name, a, b)

    def forward(self, a, b):
        return a * b

    def backward(self, g, y, a, b):
        return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


class Sigmoid(Primitive):
    name = "sigmoid"

    def forward(self, x):
        return expit(x)

    def backward(self, g, y, x):
        return (g * y * (1.0 - y),)


class Tanh(Primitive):
    name = "tanh"

    def forward(self, x):
        return np.tanh(x)

    def backward(self, g, y, x):
        return (g * (1.0 - y * y),)


class Log(Primitive):
    name = "log"

    def forward(self, x):
        return np.log(x)

    def backward(self, g, y, x):
        return (g / x,)


class Relu(Primitive):
    name = "relu"

    def forward(self, x):
        return np.maximum(x, 0.0)

    def backward(self, g, y, x):
        return (g * (x > 0.0),)


class Where(Primitive):
    """mask が True の要素は a、False の要素は b をそのままコピーする。"""

    name = "where"

    def check(self, a, b, mask=None):
        try:
            np.broadcast_shapes(a.shape, b.shape, np.shape(mask))
        except ValueError:
            raise ShapeMismatchError(self.name, a.shape, b.shape, np.shape(mask)) from None

    def forward(self, a, b, mask=None):
        return np.where(mask, a, b)

    def backward(self, g, y, a, b, mask=None):
        zero = np.zeros_like(g)
        return (
            _unbroadcast(np.where(mask, g, zero), a.shape),
            _unbroadcast(np.where(mask, zero, g), b.shape),
        )


# =========================
# linear algebra
# =========================
class MatMul(Primitive):
    """a (..., k) @ b (k, n)。transpose_b=True なら b は (n, k)。"""

    name = "matmul"

    def check(self, a, b, transpose_b=False):
        if b.ndim != 2 or a.ndim < 1:
            raise ShapeMismatchError(self.name, a.shape, b.shape, detail="right operand must be 2-D")
        k = b.shape[1] if transpose_b else b.shape[0]
        if a.shape[-1] != k:
            raise ShapeMismatchError(self.name, a.shape, b.shape, detail=f"transpose_b={transpose_b}")

    def forward(self, a, b, transpose_b=False):
        return a @ (b.T if transpose_b else b)

    def backward(self, g, y, a, b, transpose_b=False):
        bb = b.T if transpose_b else b
        k, n = bb.shape
        ga = g @ bb.T
        gb = a.reshape(-1, k).T @ g.reshape(-1, n)
        if transpose_b:
            gb = gb.T
        return ga, gb


class Outer(Primitive):
    """a (..., m) ⊗ b (..., n) -> (..., m, n)"""

    name = "outer"

    def check(self, a, b, **attrs):
        if a.shape[:-1] != b.shape[:-1]:
            raise ShapeMismatchError(self.name, a.shape, b.shape, detail="batch dims differ")

    def forward(self, a, b):
        return a[..., :, None] * b[..., None, :]

    def backward(self, g, y, a, b):
        return (g * b[..., None, :]).sum(axis=-1), (g * a[..., :, None]).sum(axis=-2)


class Cosine(Primitive):
    """key (..., d) と各 slot M (..., m, d) の cosine 類似度 -> (..., m)"""

    name = "cosine"

    def check(self, k, M, **attrs):
        if M.ndim < 2 or k.shape[-1] != M.shape[-1] or k.shape[:-1] != M.shape[:-2]:
            raise ShapeMismatchError(self.name, k.shape, M.shape)

    def forward(self, k, M):
        dot = (M @ k[..., :, None])[..., 0]
        nk = np.sqrt((k * k).sum(axis=-1))
        nM = np.sqrt((M * M).sum(axis=-1))
        return dot / ((nk + COSINE_EPS)[..., None] * (nM + COSINE_EPS))

    def backward(self, g, y, k, M):
        nk = np.sqrt((k * k).sum(axis=-1))
        nM = np.sqrt((M * M).sum(axis=-1))
        p = (nk + COSINE_EPS)[..., None]
        q = nM + COSINE_EPS
        gd = g / (p * q)
        gk = (gd[..., None, :] @ M)[..., 0, :]
        khat = _safe_unit(k, nk)
        gk = gk - ((g * y).sum(axis=-1) / (nk + COSINE_EPS))[..., None] * khat
        gM = gd[..., :, None] * k[..., None, :] - ((g * y) / q)[..., :, None] * _safe_unit(M, nM)
        return gk, gM


# =========================
# normalisation / reductions
# =========================
class Softmax(Primitive):
    name = "softmax"

    def forward(self, x, axis=-1):
        z = x - x.max(axis=axis, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=axis, keepdims=True)

    def backward(self, g, y, x, axis=-1):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)


class ReduceSum(Primitive):
    name = "reduce_sum"

    def forward(self, x, axis=None, keepdims=False):
        return np.asarray(x.sum(axis=axis, keepdims=keepdims))

    def backward(self, g, y, x, axis=None, keepdims=False):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.array(np.broadcast_to(g, x.shape)),)


# =========================
# structural
# =========================
class Concat(Primitive):
    name = "concat"

    def check(self, *xs, axis=-1):
        ref = list(xs[0].shape)
        for x in xs[1:]:
            other = list(x.shape)
            if len(other) != len(ref):
                raise ShapeMismatchError(self.name, *(v.shape for v in xs))
            a = axis % len(ref)
            if other[:a] + other[a + 1:] != ref[:a] + ref[a + 1:]:
                raise ShapeMismatchError(self.name, *(v.shape for v in xs))

    def forward(self, *xs, axis=-1):
        return np.concatenate(xs, axis=axis)

    def backward(self, g, y, *xs, axis=-1):
        cuts = np.cumsum([x.shape[axis] for x in xs])[:-1]
        return tuple(np.split(g, cuts, axis=axis))


class Slice(Primitive):
    name = "slice"

    def forward(self, x, key=None):
        return x[key]

    def backward(self, g, y, x, key=None):
        out = np.zeros_like(x)
        if _has_array_index(key):
            np.add.at(out, key, g)
        else:
            out[key] = g
        return (out,)


class Gather(Primitive):
    """embedding lookup: table (V, d)[idx] -> idx.shape + (d,)"""

    name = "gather"

    def check(self, table, idx=None):
        idx = np.asarray(idx)
        if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
            raise ShapeMismatchError(self.name, table.shape, idx.shape, detail="index out of range")

    def forward(self, table, idx=None):
        return table[idx]

    def backward(self, g, y, table, idx=None):
        out = np.zeros_like(table)
        np.add.at(out, idx, g)
        return (out,)


PRIMITIVES: Dict[str, Primitive] = {
    p.name: p
    for p in (
        Add(), Sub(), Mul(), Sigmoid(), Tanh(), Log(), Relu(), Where(),
        MatMul(), Outer(), Cosine(), Softmax(), ReduceSum(), Concat(), Slice(), Gather(),
    )
}


def primitive_names() -> Sequence[str]:
    return tuple(PRIMITIVES)
