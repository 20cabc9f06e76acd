# app/core/errors.py
from __future__ import annotations

from typing import Dict, Optional


class MimnError(Exception):
    """アプリ共通の基底例外。CLI / router はこれを見て exit code / status を決める。"""


class ShapeMismatchError(MimnError, ValueError):
    def __init__(self, op: str, *shapes: tuple, detail: str = ""):
        shown = ", ".join(str(tuple(s)) for s in shapes)
        msg = f"{op}: incompatible shapes {shown}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)
        self.op = op
        self.shapes = shapes


class NonFiniteError(MimnError, FloatingPointError):
    pass


class UnknownIdError(MimnError, KeyError):
    pass


class DataError(MimnError, ValueError):
    pass


class ConfigError(MimnError, ValueError):
    pass


class TrainingDivergedError(MimnError, RuntimeError):
    def __init__(self, step: int, lr: float, grad_norms: Optional[Dict[str, float]] = None):
        norms = grad_norms or {}
        worst = sorted(norms.items(), key=lambda kv: -(kv[1] if kv[1] == kv[1] else float("inf")))[:5]
        shown = ", ".join(f"{k}={v:.3e}" for k, v in worst)
        super().__init__(f"non-finite loss at step {step} (lr={lr:.3e}); grad norms: {shown or 'n/a'}")
        self.step = step
        self.lr = lr
        self.grad_norms = norms


class StateQuarantinedError(MimnError):
    def __init__(self, user_id: str, reason: str):
        super().__init__(f"state of user {user_id!r} quarantined: {reason}")
        self.user_id = user_id
        self.reason = reason


class SnapshotError(MimnError):
    pass


class VersionConflictError(MimnError, ValueError):
    pass


class GradientCheckError(MimnError, AssertionError):
    def __init__(self, max_error: float, threshold: float, worst: str = ""):
        where = f" at {worst}" if worst else ""
        super().__init__(f"gradient check failed: max relative error {max_error:.3e}{where} >= {threshold:.1e}")
        self.max_error = max_error
        self.threshold = threshold
        self.worst = worst
