# app/main.py
from __future__ import annotations

import logging
import os
from pathlib import Path
from typing import Optional

from fastapi import FastAPI

from app.core.logging import setup_logging
from app.routers.rtp import router as rtp_router
from app.routers.uic import router as uic_router
from app.services.trainer.checkpoint import load_checkpoint
from app.services.uic.archive import SnapshotArchive
from app.services.uic.store import ModelRelease, StateStore

logger = logging.getLogger(__name__)


def store_from_env() -> Optional[StateStore]:
    """MIMN_CHECKPOINT / MIMN_STATE_DIR から store を作る。checkpoint 未設定なら None。"""
    ckpt_path = os.getenv("MIMN_CHECKPOINT")
    if not ckpt_path:
        return None
    ckpt = load_checkpoint(Path(ckpt_path))
    archive = SnapshotArchive(Path(os.getenv("MIMN_STATE_DIR", "uic_state")))
    store = StateStore(ModelRelease(ckpt.params, ckpt.hyper, ckpt.vocab), archive=archive)
    blob = archive.read_current()
    if blob is not None:
        store.restore_blob(blob)
    logger.info("UIC store ready: param version %d, %d users", store.param_version, len(store))
    return store


def create_app(store: Optional[StateStore] = None) -> FastAPI:
    setup_logging()
    app = FastAPI(title="MIMN UIC / RTP", version="0.1.0")
    app.state.store = store if store is not None else store_from_env()

    app.include_router(uic_router)
    app.include_router(rtp_router)

    @app.get("/health")
    def health_check():
        s = app.state.store
        return {
            "status": "ok",
            "store": s is not None,
            "param_version": s.param_version if s is not None else None,
            "users": len(s) if s is not None else 0,
        }

    return app


app = create_app()
