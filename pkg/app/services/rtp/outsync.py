# app/services/rtp/outsync.py
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from typing import Dict, Sequence

from app.schemas.events import Candidate, ScoreRequest
from app.services.data.types import Sample
from app.services.rtp.serving import handle_request
from app.services.trainer.metrics import auc
from app.services.uic.store import ModelRelease, StateStore

logger = logging.getLogger(__name__)


@dataclass
class OutSyncReport:
    uic_version: int
    scorer_version: int
    auc_sync: float
    auc_outsync: float
    samples: int

    @property
    def delta(self) -> float:
        return self.auc_outsync - self.auc_sync

    def as_dict(self) -> Dict[str, float]:
        out = asdict(self)
        out["delta"] = self.delta
        return out


def _score_all(store: StateStore, scorer: ModelRelease, samples: Sequence[Sample]):
    scores = []
    for n, s in enumerate(samples):
        req = ScoreRequest(
            user_id=f"{s.user_id}#{n}",
            candidates=[Candidate(item_id=s.target[0], category_id=s.target[1])],
        )
        scores.extend(handle_request(req, store, release=scorer))
    return scores


def simulate_out_sync(old: ModelRelease, new: ModelRelease, samples: Sequence[Sample]) -> OutSyncReport:
    """
    UIC は旧 version の parameter で状態を作り、採点側だけ新 version に上がっている状況を再現する。
    同期した場合（両方とも新 version）との AUC 差を返す。差は報告のみで判定はしない。
    """
    histories = {f"{s.user_id}#{n}": list(s.history) for n, s in enumerate(samples)}

    stale = StateStore(old)
    stale.warm_up(histories)
    synced = StateStore(new)
    synced.warm_up(histories)

    labels = [s.label for s in samples]
    auc_out = auc(_score_all(stale, new, samples), labels)
    auc_sync = auc(_score_all(synced, new, samples), labels)

    report = OutSyncReport(
        uic_version=old.version,
        scorer_version=new.version,
        auc_sync=auc_sync,
        auc_outsync=auc_out,
        samples=len(samples),
    )
    logger.info("out-sync: auc sync=%.4f out-sync=%.4f delta=%+.4f", auc_sync, auc_out, report.delta)
    return report
