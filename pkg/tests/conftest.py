# tests/conftest.py
from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from app.db.session import configure_engine
from app.schemas.config import HyperParams
from app.services.data.synthetic import user_streams
from app.services.mimn.params import init_mimn_params
from app.services.uic.store import ModelRelease

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture(autouse=True)
def temp_db(tmp_path, monkeypatch):
    """テストごとに一時 SQLite を使う。"""
    url = f"sqlite:///{tmp_path / 'test.db'}"
    monkeypatch.setenv("DATABASE_URL", url)
    monkeypatch.delenv("MIMN_CHECKPOINT", raising=False)
    # CLI の StreamHandler は付けず、pytest の log capture に任せる
    monkeypatch.setattr("app.core.logging._configured", True)
    configure_engine(url)
    yield url


@pytest.fixture
def fixtures_dir() -> Path:
    return FIXTURES


@pytest.fixture
def tiny_hyper() -> HyperParams:
    return HyperParams(m=4, d=6, h=5, k_top=2, mlp_widths=[12, 2], memory_init="uniform", init_seed=3)


@pytest.fixture
def tiny_params(tiny_hyper):
    return init_mimn_params(tiny_hyper, n_items=12, n_categories=5, seed=1)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def streams_and_vocab():
    return user_streams(n_users=6, length=30, n_items=40, n_categories=6, seed=5)


@pytest.fixture
def stream_release(tiny_hyper, streams_and_vocab):
    _, vocab = streams_and_vocab
    params = init_mimn_params(tiny_hyper, vocab.n_items, vocab.n_categories, seed=2)
    return ModelRelease(params=params, hyper=tiny_hyper, vocab=vocab)
