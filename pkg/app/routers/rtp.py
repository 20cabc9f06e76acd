# app/routers/rtp.py
from __future__ import annotations

from fastapi import APIRouter, Depends

from app.routers.deps import get_store, http_error
from app.schemas.events import ScoreRequest, ScoreResponse
from app.services.rtp.serving import score_state
from app.services.uic.store import StateStore

router = APIRouter(prefix="/rtp", tags=["rtp"])


@router.post("/score", response_model=ScoreResponse)
def post_score(req: ScoreRequest, store: StateStore = Depends(get_store)) -> ScoreResponse:
    release = store.release
    try:
        state = store.get_state(req.user_id)
        scores = score_state(req, state, release)
    except Exception as e:
        raise http_error(e)
    return ScoreResponse(
        user_id=req.user_id,
        scores=scores,
        param_version=release.version,
        state_version=state.version,
    )
