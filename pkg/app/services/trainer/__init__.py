# app/services/trainer/__init__.py
# train() は app.services.trainer.train から直接 import する（submodule 名と衝突するため）
from app.services.trainer.metrics import MetricReport, auc
from app.services.trainer.train import evaluate

__all__ = ["MetricReport", "auc", "evaluate"]
