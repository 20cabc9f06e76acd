from __future__ import annotations

import logging
from contextlib import contextmanager
from datetime import datetime
from typing import Any, Callable, Dict, Optional

from sqlalchemy.orm import Session

from app.db.models.run import MimnRun, RunStatus, RunType

logger = logging.getLogger(__name__)


@contextmanager
def db_transaction(db: Session):
    try:
        yield
        db.commit()
    except Exception:
        db.rollback()
        raise


def create_run(
    db: Session,
    run_type: RunType,
    params: Optional[Dict[str, Any]] = None,
    output_dir: Optional[str] = None,
) -> MimnRun:
    run = MimnRun(
        command=run_type.value,
        status=RunStatus.running.value,
        params=params or {},
        output_dir=output_dir,
        started_at=datetime.utcnow(),
    )
    db.add(run)
    db.flush()
    return run


def finalize_run_success(db: Session, run: MimnRun, result: Optional[Dict[str, Any]] = None):
    run.status = RunStatus.success.value
    run.finished_at = datetime.utcnow()
    run.result = result
    db.add(run)


def finalize_run_failed(db: Session, run: MimnRun, error: str):
    run.status = RunStatus.failed.value
    run.finished_at = datetime.utcnow()
    run.error = error[:8000]
    db.add(run)


def execute_step(
    db: Session,
    run_type: RunType,
    step_fn: Callable[[Dict[str, Any]], Dict[str, Any]],
    *,
    params: Optional[Dict[str, Any]] = None,
    output_dir: Optional[str] = None,
) -> Dict[str, Any]:
    params = params or {}

    # run作成だけ先に確定
    with db_transaction(db):
        run = create_run(db=db, run_type=run_type, params=params, output_dir=output_dir)

    try:
        result = step_fn(params)
    except Exception as e:
        with db_transaction(db):
            finalize_run_failed(db, run, error=repr(e))
        logger.info("run %d (%s) failed", run.id, run_type.value)
        raise

    with db_transaction(db):
        finalize_run_success(db, run, result=result)
    return {"run_id": run.id, "result": result}
