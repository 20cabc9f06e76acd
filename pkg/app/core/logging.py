# app/core/logging.py
from __future__ import annotations

import logging
import os
import sys
from typing import Optional, Union

# alembic.ini の generic formatter と同じ形式
LOG_FORMAT = "%(levelname)-5.5s [%(name)s] %(message)s"

_configured = False


def setup_logging(level: Optional[Union[int, str]] = None) -> None:
    """stderr への StreamHandler を1回だけ設定する。"""
    global _configured
    if level is None:
        level = os.getenv("MIMN_LOG_LEVEL", "INFO")
    if isinstance(level, str):
        level = logging.getLevelName(level.upper())
        if not isinstance(level, int):
            level = logging.INFO

    root = logging.getLogger("app")
    root.setLevel(level)
    if _configured:
        return

    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    root.addHandler(handler)
    _configured = True
