# app/services/mimn/__init__.py
from app.services.mimn.model import SampleBatch, predict, process_sequence, training_loss
from app.services.mimn.params import ModelParams, init_mimn_params
from app.services.mimn.state import UserInterestState, initial_state

__all__ = [
    "ModelParams",
    "SampleBatch",
    "UserInterestState",
    "init_mimn_params",
    "initial_state",
    "predict",
    "process_sequence",
    "training_loss",
]
