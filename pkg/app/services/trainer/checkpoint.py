# app/services/trainer/checkpoint.py
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from safetensors import safe_open
from safetensors.numpy import save_file

from app.core.errors import ConfigError
from app.schemas.config import HyperParams
from app.services.data.vocab import Vocabulary
from app.services.mimn.params import ModelParams

CHECKPOINT_FORMAT = "mimn-checkpoint"
CHECKPOINT_VERSION = "1"


@dataclass
class Checkpoint:
    params: ModelParams
    hyper: HyperParams
    vocab: Optional[Vocabulary] = None


def save_checkpoint(
    path: Path,
    params: ModelParams,
    hyper: HyperParams,
    vocab: Optional[Vocabulary] = None,
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    metadata = {
        "format": CHECKPOINT_FORMAT,
        "format_version": CHECKPOINT_VERSION,
        "kind": params.kind,
        "param_version": str(params.version),
        "hyper": hyper.model_dump_json(by_alias=True),
        "n_items": str(params.n_items),
        "n_categories": str(params.n_categories),
    }
    if vocab is not None:
        metadata["vocabulary"] = json.dumps(vocab.to_header(), ensure_ascii=False)
    tensors = {k: np.ascontiguousarray(v, dtype=np.float64) for k, v in params.items()}
    save_file(tensors, str(path), metadata=metadata)
    return path


def load_checkpoint(path: Path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    try:
        with safe_open(str(path), framework="numpy") as f:
            meta = f.metadata() or {}
            if meta.get("format") != CHECKPOINT_FORMAT:
                raise ConfigError(f"{path}: not a checkpoint file")
            if meta.get("format_version") != CHECKPOINT_VERSION:
                raise ConfigError(f"{path}: unsupported checkpoint version {meta.get('format_version')}")
            tensors = {k: f.get_tensor(k) for k in f.keys()}
    except ConfigError:
        raise
    except Exception as e:
        # safetensors のヘッダが壊れている
        raise ConfigError(f"{path}: unreadable checkpoint ({e})") from e

    hyper = HyperParams.model_validate_json(meta["hyper"])
    params = ModelParams(tensors=tensors, version=int(meta.get("param_version", "0")), kind=meta.get("kind", "mimn"))
    vocab = Vocabulary.from_header(json.loads(meta["vocabulary"])) if "vocabulary" in meta else None
    return Checkpoint(params=params, hyper=hyper, vocab=vocab)
