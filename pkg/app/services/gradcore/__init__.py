# app/services/gradcore/__init__.py
from app.services.gradcore.check import check_gradients, flipped_backward, gradient_errors
from app.services.gradcore.primitives import COSINE_EPS, PRIMITIVES, primitive_names
from app.services.gradcore.tape import GradientSet, OpRecord, Tape, Tensor, backward, evaluate

__all__ = [
    "COSINE_EPS",
    "GradientSet",
    "OpRecord",
    "PRIMITIVES",
    "Tape",
    "Tensor",
    "backward",
    "check_gradients",
    "evaluate",
    "flipped_backward",
    "gradient_errors",
    "primitive_names",
]
