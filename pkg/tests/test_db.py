# tests/test_db.py
from __future__ import annotations

from pathlib import Path

import pytest
from alembic import command
from alembic.config import Config
from sqlalchemy import create_engine, inspect

ROOT = Path(__file__).resolve().parents[1]
TABLES = ("mimn_runs", "uic_snapshots")


def _schema(url):
    engine = create_engine(url)
    try:
        insp = inspect(engine)
        return {
            t: (insp.get_pk_constraint(t)["name"], sorted(ix["name"] for ix in insp.get_indexes(t)))
            for t in TABLES
        }
    finally:
        engine.dispose()


@pytest.fixture
def migrated_url(tmp_path, monkeypatch):
    url = f"sqlite:///{tmp_path / 'migrated.db'}"
    monkeypatch.setenv("DATABASE_URL", url)
    cfg = Config()
    cfg.set_main_option("script_location", str(ROOT / "alembic"))
    command.upgrade(cfg, "head")
    return url


def test_migration_and_models_name_constraints_alike(temp_db, migrated_url):
    migrated = _schema(migrated_url)
    created = _schema(temp_db)
    assert migrated == created
    assert migrated["mimn_runs"][0] == "pk_mimn_runs"
    assert migrated["uic_snapshots"] == ("pk_uic_snapshots", ["ix_uic_snapshots_created_at", "ix_uic_snapshots_snapshot_id"])
