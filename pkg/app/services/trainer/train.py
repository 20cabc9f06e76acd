# app/services/trainer/train.py
from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from app.core.errors import DataError, NonFiniteError, TrainingDivergedError
from app.schemas.config import HyperParams, TrainConfig
from app.services.data.types import Sample
from app.services.data.vocab import Vocabulary
from app.services.gradcore.tape import GradientSet, Tape
from app.services.mimn.model import SampleBatch, final_utilization
from app.services.mimn.params import ModelParams
from app.services.trainer.metrics import EpochRecord, MetricReport, auc, slot_variance
from app.services.trainer.models import CtrModel, get_model
from app.services.trainer.optimizer import Adam

logger = logging.getLogger(__name__)

# 評価時の1回あたりの sample 数
SCORE_CHUNK = 512


# =========================
# gradient
# =========================
def _shard_grads(model: CtrModel, params: ModelParams, hyper: HyperParams, batch: SampleBatch) -> Tuple[float, GradientSet]:
    tape = Tape(record=True)
    loss, _ = model.build_loss(tape, tape.bind(params), hyper, batch)
    return float(loss.value), tape.backward(loss)


def batch_gradients(
    model: CtrModel,
    params: ModelParams,
    hyper: HyperParams,
    batch: SampleBatch,
    pool: Optional[ThreadPoolExecutor] = None,
    workers: int = 1,
) -> Tuple[float, Dict[str, np.ndarray]]:
    """
    batch 平均 loss とその勾配。workers > 1 なら行を shard に分けて並列に tape を作り、
    shard 順に重み付きで足し合わせる。
    """
    if pool is None or workers <= 1 or batch.size < 2 * workers:
        return _shard_grads(model, params, hyper, batch)

    shards = [s for s in np.array_split(np.arange(batch.size), workers) if s.size]
    futures = [pool.submit(_shard_grads, model, params, hyper, batch.take(rows)) for rows in shards]
    loss = 0.0
    grads: Dict[str, np.ndarray] = {}
    for rows, fut in zip(shards, futures):
        w = rows.size / batch.size
        l_s, g_s = fut.result()
        loss += w * l_s
        for k, v in g_s.items():
            grads[k] = w * v if k not in grads else grads[k] + w * v
    return loss, grads


# =========================
# scoring / evaluation
# =========================
def score_samples(
    model: CtrModel, params: ModelParams, hyper: HyperParams, batch: SampleBatch
) -> np.ndarray:
    out: List[np.ndarray] = []
    for start in range(0, batch.size, SCORE_CHUNK):
        rows = np.arange(start, min(start + SCORE_CHUNK, batch.size))
        out.append(model.score(params, hyper, batch.take(rows)))
    return np.concatenate(out) if out else np.zeros(0)


def evaluate(
    params: ModelParams,
    hyper: HyperParams,
    samples: Sequence[Sample],
    vocab: Vocabulary,
    model_kind: Optional[str] = None,
) -> MetricReport:
    model = get_model(model_kind or params.kind)
    batch = vocab.encode_batch(samples, profile_dim=hyper.profile_dim)
    scores = score_samples(model, params, hyper, batch)
    report = MetricReport(model=model.kind, auc=auc(scores, batch.labels.astype(int)))
    if model.has_memory:
        report.g_variance = utilization_variance(params, hyper, batch)
    return report


def utilization_variance(params: ModelParams, hyper: HyperParams, batch: SampleBatch) -> float:
    gs = []
    for start in range(0, batch.size, SCORE_CHUNK):
        rows = np.arange(start, min(start + SCORE_CHUNK, batch.size))
        gs.append(final_utilization(params, hyper, batch.take(rows)))
    return slot_variance(np.concatenate(gs, axis=0))


# =========================
# train
# =========================
def train(
    config: TrainConfig,
    train_samples: Sequence[Sample],
    vocab: Vocabulary,
    test_samples: Optional[Sequence[Sample]] = None,
) -> Tuple[ModelParams, MetricReport]:
    if not train_samples:
        raise DataError("training set is empty")

    hyper = config.hyper
    model = get_model(config.model)
    params = model.init_params(hyper, vocab.n_items, vocab.n_categories, config.seed)
    report = MetricReport(model=model.kind)

    data = vocab.encode_batch(train_samples, profile_dim=hyper.profile_dim, policy=hyper.unknown_id_policy)
    n = data.size
    steps_per_epoch = -(-n // config.batch_size)
    opt = Adam(
        params,
        lr0=config.lr0,
        decay_rate=config.decay_rate,
        decay_interval=config.decay_interval or steps_per_epoch,
    )
    rng = np.random.default_rng(config.seed)
    pool = ThreadPoolExecutor(max_workers=config.workers) if config.workers > 1 else None

    last_norms: Dict[str, float] = {}
    try:
        for epoch in range(config.epochs):
            t0 = time.perf_counter()
            order = rng.permutation(n)
            losses: List[float] = []
            batches = range(0, n, config.batch_size)
            it = tqdm(batches, desc=f"epoch {epoch + 1}", leave=False, disable=not config.progress)
            for start in it:
                batch = data.take(order[start : start + config.batch_size])
                lr = opt.lr
                try:
                    loss, grads = batch_gradients(model, params, hyper, batch, pool, config.workers)
                except NonFiniteError:
                    raise TrainingDivergedError(opt.steps, lr, last_norms) from None
                norms = GradientSet(grads).norms()
                if not np.isfinite(loss) or not all(np.isfinite(v) for v in norms.values()):
                    raise TrainingDivergedError(opt.steps, lr, norms)
                last_norms = norms
                opt.step(params, grads)
                losses.append(loss)

            rec = EpochRecord(
                epoch=epoch + 1,
                loss=float(np.mean(losses)),
                lr=opt.lr,
                seconds=time.perf_counter() - t0,
                steps=opt.steps,
            )
            report.add_epoch(rec)
            logger.info("epoch %d/%d loss=%.5f lr=%.3e (%.1fs)", rec.epoch, config.epochs, rec.loss, rec.lr, rec.seconds)
    except TrainingDivergedError as e:
        logger.error("%s", e)
        raise
    finally:
        if pool is not None:
            pool.shutdown(wait=True)

    report.steps = opt.steps
    eval_samples = test_samples if test_samples else train_samples
    labels = {s.label for s in eval_samples}
    if labels == {0, 1}:
        report.auc = evaluate(params, hyper, eval_samples, vocab, model.kind).auc
    if model.has_memory:
        report.g_variance = utilization_variance(params, hyper, data)
    return params, report
