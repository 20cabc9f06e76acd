# app/services/gradcore/tape.py
from __future__ import annotations

from contextvars import ContextVar
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, FrozenSet, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from app.core.errors import NonFiniteError, ShapeMismatchError
from app.services.gradcore.primitives import PRIMITIVES

ArrayLike = Union["Tensor", np.ndarray, float, int]

# backward の符号を反転させる primitive 名（gradcheck のテスト用）。thread ごとに独立
FLIPPED_PRIMITIVES: ContextVar[FrozenSet[str]] = ContextVar("flipped_primitives", default=frozenset())


# =========================
# Tensor
# =========================
class Tensor:
    """tape 上の1ノード。value は float64 の dense 配列。"""

    __slots__ = ("value", "tape", "index")

    def __init__(self, value: np.ndarray, tape: Optional["Tape"] = None, index: int = -1):
        self.value = value
        self.tape = tape
        self.index = index

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, index={self.index})"

    def __add__(self, other: ArrayLike) -> "Tensor":
        return self.tape.add(self, other)

    def __radd__(self, other: ArrayLike) -> "Tensor":
        return self.tape.add(other, self)

    def __sub__(self, other: ArrayLike) -> "Tensor":
        return self.tape.sub(self, other)

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        return self.tape.sub(other, self)

    def __mul__(self, other: ArrayLike) -> "Tensor":
        return self.tape.mul(self, other)

    def __rmul__(self, other: ArrayLike) -> "Tensor":
        return self.tape.mul(other, self)

    def __matmul__(self, other: ArrayLike) -> "Tensor":
        return self.tape.matmul(self, other)

    def __getitem__(self, key: Any) -> "Tensor":
        return self.tape.slice(self, key)


@dataclass
class OpRecord:
    kind: str
    inputs: Tuple[int, ...]
    output: int
    attrs: Dict[str, Any] = field(default_factory=dict)


class GradientSet(dict):
    """parameter 名 -> 勾配配列（parameter と同じ shape）"""

    def norms(self) -> Dict[str, float]:
        return {k: float(np.sqrt((v * v).sum())) for k, v in self.items()}

    def global_norm(self) -> float:
        return float(np.sqrt(sum(float((v * v).sum()) for v in self.values())))


# =========================
# Tape
# =========================
class Tape:
    """
    forward 評価中に primitive を順に記録し、逆順に辿って勾配を積み上げる。
    record=False の場合は同じ forward コードを記録なしで実行する（serving 用）。
    """

    def __init__(self, record: bool = True, check_finite: Optional[bool] = None):
        self.record = record
        self.check_finite = record if check_finite is None else check_finite
        self.flipped = FLIPPED_PRIMITIVES.get()
        self.values: List[np.ndarray] = []
        self.ops: List[OpRecord] = []
        self.parameters: Dict[str, int] = {}

    # -------------------------
    # leaves
    # -------------------------
    def _leaf(self, value: np.ndarray) -> Tensor:
        if not self.record:
            return Tensor(value, self)
        self.values.append(value)
        return Tensor(value, self, len(self.values) - 1)

    def constant(self, value: Any) -> Tensor:
        return self._leaf(np.asarray(value, dtype=np.float64))

    def parameter(self, name: str, value: np.ndarray) -> Tensor:
        t = self._leaf(np.asarray(value, dtype=np.float64))
        if self.record:
            if name in self.parameters:
                raise ValueError(f"parameter {name!r} registered twice")
            self.parameters[name] = t.index
        return t

    def bind(self, params: Any) -> Dict[str, Tensor]:
        arrays = params.tensors if hasattr(params, "tensors") else params
        return {name: self.parameter(name, arr) for name, arr in arrays.items()}

    def lift(self, x: ArrayLike) -> Tensor:
        if isinstance(x, Tensor):
            return x
        return self.constant(x)

    # -------------------------
    # op dispatch
    # -------------------------
    def apply(self, kind: str, *inputs: ArrayLike, **attrs: Any) -> Tensor:
        prim = PRIMITIVES[kind]
        xs = [self.lift(x) for x in inputs]
        vals = [x.value for x in xs]
        prim.check(*vals, **attrs)
        try:
            out = prim.forward(*vals, **attrs)
        except ValueError as e:
            raise ShapeMismatchError(kind, *(v.shape for v in vals), detail=str(e)) from None
        if self.check_finite and not np.isfinite(out).all():
            raise NonFiniteError(f"{kind} produced non-finite values (input shapes {[v.shape for v in vals]})")
        if not self.record:
            return Tensor(out, self)
        self.values.append(out)
        idx = len(self.values) - 1
        self.ops.append(OpRecord(kind, tuple(x.index for x in xs), idx, attrs))
        return Tensor(out, self, idx)

    def add(self, a: ArrayLike, b: ArrayLike) -> Tensor:
        return self.apply("add", a, b)

    def sub(self, a: ArrayLike, b: ArrayLike) -> Tensor:
        return self.apply("sub", a, b)

    def mul(self, a: ArrayLike, b: ArrayLike) -> Tensor:
        return self.apply("mul", a, b)

    def matmul(self, a: ArrayLike, b: ArrayLike, transpose_b: bool = False) -> Tensor:
        return self.apply("matmul", a, b, transpose_b=transpose_b)

    def softmax(self, x: ArrayLike, axis: int = -1) -> Tensor:
        return self.apply("softmax", x, axis=axis)

    def sigmoid(self, x: ArrayLike) -> Tensor:
        return self.apply("sigmoid", x)

    def tanh(self, x: ArrayLike) -> Tensor:
        return self.apply("tanh", x)

    def log(self, x: ArrayLike) -> Tensor:
        return self.apply("log", x)

    def relu(self, x: ArrayLike) -> Tensor:
        return self.apply("relu", x)

    def cosine(self, key: ArrayLike, memory: ArrayLike) -> Tensor:
        return self.apply("cosine", key, memory)

    def outer(self, a: ArrayLike, b: ArrayLike) -> Tensor:
        return self.apply("outer", a, b)

    def concat(self, xs: Sequence[ArrayLike], axis: int = -1) -> Tensor:
        return self.apply("concat", *xs, axis=axis)

    def slice(self, x: ArrayLike, key: Any) -> Tensor:
        return self.apply("slice", x, key=key)

    def reduce_sum(self, x: ArrayLike, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
        return self.apply("reduce_sum", x, axis=axis, keepdims=keepdims)

    def gather(self, table: ArrayLike, idx: np.ndarray) -> Tensor:
        return self.apply("gather", table, idx=np.asarray(idx, dtype=np.int64))

    def where(self, mask: np.ndarray, a: ArrayLike, b: ArrayLike) -> Tensor:
        return self.apply("where", a, b, mask=np.asarray(mask, dtype=bool))

    # -------------------------
    # replay / backward
    # -------------------------
    def replay(self) -> List[np.ndarray]:
        """leaf の値から全 op を再実行した値のリストを返す。"""
        vals = list(self.values)
        for op in self.ops:
            prim = PRIMITIVES[op.kind]
            vals[op.output] = prim.forward(*(vals[i] for i in op.inputs), **op.attrs)
        return vals

    def backward(self, loss: Tensor) -> GradientSet:
        if not self.record:
            raise RuntimeError("backward requires a recording tape")
        if loss.value.size != 1:
            raise ShapeMismatchError("backward", loss.shape, detail="loss must be scalar")

        grads: List[Optional[np.ndarray]] = [None] * len(self.values)
        grads[loss.index] = np.ones_like(loss.value)
        for op in reversed(self.ops):
            g = grads[op.output]
            if g is None:
                continue
            prim = PRIMITIVES[op.kind]
            ins = [self.values[i] for i in op.inputs]
            sign = -1.0 if op.kind in self.flipped else 1.0
            for i, gi in zip(op.inputs, prim.vjp(g, self.values[op.output], *ins, **op.attrs)):
                if gi is None:
                    continue
                if sign != 1.0:
                    gi = gi * sign
                grads[i] = gi if grads[i] is None else grads[i] + gi

        out = GradientSet()
        for name, idx in self.parameters.items():
            g = grads[idx]
            out[name] = np.zeros_like(self.values[idx]) if g is None else g
        return out


def evaluate(
    tape_builder: Callable[..., Tensor],
    params: Any,
    *inputs: Any,
    record: bool = True,
) -> Tuple[Tensor, Tape]:
    """tape_builder(tape, bound_params, *inputs) を評価し (output, tape) を返す。"""
    tape = Tape(record=record)
    bound = tape.bind(params)
    out = tape_builder(tape, bound, *inputs)
    return out, tape


def backward(tape: Tape, loss: Tensor) -> GradientSet:
    return tape.backward(loss)


def as_arrays(params: Any) -> Mapping[str, np.ndarray]:
    return params.tensors if hasattr(params, "tensors") else params
