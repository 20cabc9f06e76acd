import os
from pathlib import Path
from typing import Optional

from dotenv import load_dotenv
from sqlalchemy import create_engine
from sqlalchemy.engine import Engine
from sqlalchemy.orm import Session, sessionmaker

# =========================
# Database configuration
# =========================

load_dotenv()

BASE_DIR = Path(__file__).resolve().parents[2]
DEFAULT_DB = BASE_DIR / "mimn.db"

SessionLocal = sessionmaker(autocommit=False, autoflush=False)

_engine: Optional[Engine] = None


def database_url() -> str:
    return os.getenv("DATABASE_URL", f"sqlite:///{DEFAULT_DB}")


def configure_engine(url: Optional[str] = None, create_tables: bool = True) -> Engine:
    """engine を作り直して SessionLocal に bind する（テストでは一時 DB を渡す）。"""
    global _engine
    url = url or database_url()
    connect_args = {"check_same_thread": False} if url.startswith("sqlite") else {}
    _engine = create_engine(url, echo=False, future=True, connect_args=connect_args)
    SessionLocal.configure(bind=_engine)
    if create_tables:
        # create_all が拾うようにモデルを import
        from app.db.base import Base
        from app.db import models  # noqa: F401

        Base.metadata.create_all(bind=_engine)
    return _engine


def get_engine() -> Engine:
    if _engine is None:
        return configure_engine()
    return _engine


def new_session() -> Session:
    get_engine()
    return SessionLocal()

