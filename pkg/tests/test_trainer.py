# tests/test_trainer.py
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
import pandas as pd
import pytest
from sklearn.metrics import roc_auc_score

from app.core.errors import ConfigError, DataError, TrainingDivergedError
from app.schemas.config import HyperParams, TrainConfig
from app.services.data import synthetic
from app.services.data.ingest import ingest
from app.services.data.sampling import SplitPolicy, negative_sample, split
from app.services.mimn.baseline import embedding_mlp_baseline, init_baseline_params
from app.services.trainer import ablation
from app.services.trainer import train as train_module
from app.services.trainer.checkpoint import load_checkpoint, save_checkpoint
from app.services.trainer.metrics import MetricReport, auc, slot_variance
from app.services.trainer.models import get_model
from app.services.trainer.optimizer import Adam, decayed_lr
from app.services.trainer.train import batch_gradients, evaluate, train


def _pairwise_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    hits = 0.0
    for p in pos:
        for n in neg:
            hits += 1.0 if p > n else 0.5 if p == n else 0.0
    return hits / (len(pos) * len(neg))


def _tiny_config(**kw) -> TrainConfig:
    hyper = HyperParams(m=4, d=6, h=5, k_top=2, mlp_widths=[12, 2], memory_init="uniform", init_seed=3)
    data = {"hyper": hyper, "epochs": 1, "batch_size": 16, "lr0": 0.01, "seed": 0}
    data.update(kw)
    return TrainConfig(**data)


# =========================
# metrics
# =========================
def test_auc_matches_pairwise_count_with_ties():
    rng = np.random.default_rng(21)
    for _ in range(500):
        n = int(rng.integers(2, 30))
        labels = rng.integers(0, 2, size=n)
        labels[0], labels[1] = 0, 1
        # 丸めて同点を多めに作る
        scores = np.round(rng.random(n), 1)
        assert auc(scores, labels) == pytest.approx(_pairwise_auc(scores, labels), abs=1e-12)


def test_auc_agrees_with_sklearn(rng):
    labels = rng.integers(0, 2, size=400)
    scores = rng.random(400) + 0.3 * labels
    assert auc(scores, labels) == pytest.approx(roc_auc_score(labels, scores), abs=1e-12)


def test_auc_edge_values():
    assert auc([0.1, 0.9], [0, 1]) == 1.0
    assert auc([0.9, 0.1], [0, 1]) == 0.0
    assert auc([0.5, 0.5, 0.5], [0, 1, 1]) == 0.5


def test_auc_errors():
    with pytest.raises(DataError):
        auc([0.1, 0.2], [1, 1])
    with pytest.raises(DataError):
        auc([0.1, 0.2, 0.3], [0, 1])


def test_slot_variance():
    assert slot_variance(np.full((3, 4), 2.0)) == 0.0
    assert slot_variance(np.array([1.0, 3.0])) == pytest.approx(1.0)


def test_metric_report_lines():
    report = MetricReport(auc=0.7)
    assert report.summary()["final_loss"] is None
    assert report.to_lines()[-1].startswith('{"record": "summary"')


# =========================
# optimizer
# =========================
def test_decayed_lr():
    assert decayed_lr(0.001, 0.9, 10, 0) == 0.001
    assert decayed_lr(0.001, 0.9, 10, 9) == 0.001
    assert decayed_lr(0.001, 0.9, 10, 10) == pytest.approx(0.0009)
    assert decayed_lr(0.001, 0.9, 10, 25) == pytest.approx(0.001 * 0.81)


def test_adam_first_step_moves_by_lr(tiny_params):
    params = tiny_params.copy()
    before = params["mlp_b1"].copy()
    grads = {"mlp_b1": np.array([0.5, -2.0])}
    opt = Adam(params, lr0=0.01, decay_rate=0.5, decay_interval=1)
    assert opt.step(params, grads) == 0.01
    # bias 補正後の最初の1歩は符号 × lr
    np.testing.assert_allclose(params["mlp_b1"], before - 0.01 * np.sign(grads["mlp_b1"]), rtol=1e-6)
    assert opt.lr == 0.005
    with pytest.raises(ValueError):
        Adam(params, lr0=0.01, decay_interval=0)


def test_unknown_model_kind():
    with pytest.raises(ValueError):
        get_model("transformer")


# =========================
# train
# =========================
def test_training_is_deterministic():
    samples, vocab = synthetic.marker_task(64, n_items=20, n_categories=5, seed=4)
    cfg = _tiny_config(epochs=2)
    a, rep_a = train(cfg, samples, vocab)
    b, rep_b = train(cfg, samples, vocab)
    assert a.equals(b)
    assert rep_a.loss_curve == rep_b.loss_curve
    assert len(rep_a.epochs) == 2 and rep_a.steps == 8
    assert rep_a.auc is not None and rep_a.g_variance is not None


def test_training_lowers_the_loss():
    samples, vocab = synthetic.marker_task(200, n_items=20, n_categories=5, seed=2)
    _, report = train(_tiny_config(epochs=6, lr0=0.02), samples, vocab)
    assert report.loss_curve[-1] < report.loss_curve[0]


def test_empty_training_set():
    _, vocab = synthetic.marker_task(4, seed=0)
    with pytest.raises(DataError):
        train(_tiny_config(), [], vocab)


def test_sharded_gradients_match_single_thread(tiny_hyper):
    samples, vocab = synthetic.marker_task(12, n_items=20, n_categories=5, seed=9)
    model = get_model("mimn")
    params = model.init_params(tiny_hyper, vocab.n_items, vocab.n_categories, 0)
    batch = vocab.encode_batch(samples)

    loss1, g1 = batch_gradients(model, params, tiny_hyper, batch)
    with ThreadPoolExecutor(max_workers=2) as pool:
        loss2, g2 = batch_gradients(model, params, tiny_hyper, batch, pool, workers=2)
    assert loss2 == pytest.approx(loss1, rel=1e-12)
    for name, g in g1.items():
        np.testing.assert_allclose(g2[name], g, rtol=1e-9, atol=1e-12)


def test_divergence_is_reported(monkeypatch):
    samples, vocab = synthetic.marker_task(32, n_items=20, n_categories=5, seed=1)

    def broken(model, params, hyper, batch, pool=None, workers=1):
        return float("nan"), {k: np.zeros_like(v) for k, v in params.items()}

    monkeypatch.setattr(train_module, "batch_gradients", broken)
    with pytest.raises(TrainingDivergedError) as exc:
        train(_tiny_config(), samples, vocab)
    assert exc.value.step == 0


def test_baseline_trains_and_evaluates():
    samples, vocab = synthetic.marker_task(80, n_items=20, n_categories=5, seed=3)
    cfg = _tiny_config(model="embedding_mlp")
    params, report = train(cfg, samples, vocab)
    assert params.kind == "embedding_mlp"
    assert report.g_variance is None
    assert 0.0 <= evaluate(params, cfg.hyper, samples, vocab).auc <= 1.0


def test_baseline_ignores_history_order(tiny_hyper):
    params = init_baseline_params(tiny_hyper, 12, 5, seed=0)
    history = [(1, 1), (4, 2), (7, 3), (2, 4)]
    a = embedding_mlp_baseline(params, tiny_hyper, history, (3, 1))
    b = embedding_mlp_baseline(params, tiny_hyper, history[::-1], (3, 1))
    assert a == pytest.approx(b, abs=1e-12)
    assert 0.0 < a < 1.0


# =========================
# checkpoint
# =========================
def test_checkpoint_round_trip(tmp_path, tiny_hyper, tiny_params):
    _, vocab = synthetic.marker_task(4, n_items=11, n_categories=4)
    path = save_checkpoint(tmp_path / "ck.safetensors", tiny_params.copy(version=7), tiny_hyper, vocab)
    back = load_checkpoint(path)
    assert back.params.equals(tiny_params)
    assert back.params.version == 7
    assert back.hyper == tiny_hyper
    assert back.vocab == vocab


def test_checkpoint_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "none.safetensors")
    bad = tmp_path / "bad.safetensors"
    bad.write_bytes(b"not a checkpoint")
    with pytest.raises(ConfigError):
        load_checkpoint(bad)


def test_foreign_safetensors_file_is_rejected(tmp_path):
    from safetensors.numpy import save_file

    path = tmp_path / "other.safetensors"
    save_file({"w": np.zeros(3)}, str(path), metadata={"format": "something-else"})
    with pytest.raises(ConfigError):
        load_checkpoint(path)


# =========================
# ablation
# =========================
def _stub_runner(calls):
    def runner(cfg: TrainConfig) -> MetricReport:
        calls.append(cfg)
        g = 0.1 if cfg.model == "mimn" else None
        return MetricReport(auc=0.6 + 0.01 * cfg.seed + 0.05 * cfg.hyper.m, g_variance=g, model=cfg.model)

    return runner


def test_ablation_table_from_stub_runner():
    calls = []
    base = _tiny_config(seed=10)
    table = ablation.run_ablation(ablation.slot_grid(), base, [], [], None, runner=_stub_runner(calls))

    assert list(table["cell"]) == ["ntm_m4", "ntm_m6", "ntm_m8"]
    assert list(table["runs"]) == [3, 3, 3]
    assert len(calls) == 9
    assert [c.seed for c in calls[:3]] == [10, 11, 12]
    assert all(not c.hyper.mur and not c.hyper.miu for c in calls)

    row = table.iloc[0]
    # seed 10, 11, 12 の AUC は 0.9, 0.91, 0.92
    assert row["auc_mean"] == pytest.approx(0.91)
    assert row["auc_std"] == pytest.approx(0.01)
    assert row["auc"] == "0.9100 ± 0.0100"
    assert row["hyper.m"] == 4


def test_component_and_model_grids():
    assert [c.name for c in ablation.component_grid()] == ["mimn_base", "mimn_mur", "mimn_mur_miu"]
    calls = []
    table = ablation.run_ablation(ablation.model_grid(), _tiny_config(), [], [], None, repeats=2, runner=_stub_runner(calls))
    assert list(table["model"]) == ["embedding_mlp", "mimn"]
    assert pd.isna(table["g_variance"].iloc[0])
    assert table["g_variance"].iloc[1] == pytest.approx(0.1)


def test_cell_config_clamps_k_top():
    base = _tiny_config(hyper=HyperParams(m=4, k_top=4, mlp_widths=[8, 2]))
    cfg = ablation.cell_config(base, ablation.AblationCell("small", hyper={"m": 2}), seed=5)
    assert cfg.hyper.m == 2 and cfg.hyper.k_top == 2
    assert cfg.seed == 5


# =========================
# long-running behaviour
# =========================
@pytest.mark.slow
def test_marker_task_is_learned():
    samples, vocab = synthetic.marker_task(2000, n_items=60, n_categories=6, seed=0)
    train_s, test_s = split(samples, SplitPolicy("user_hash", test_fraction=0.2, seed=0))
    hyper = HyperParams(m=4, d=8, h=8, k_top=2, mlp_widths=[32, 16, 2], memory_init="uniform")
    cfg = TrainConfig(hyper=hyper, lr0=0.01, epochs=12, batch_size=64, seed=0)
    params, _ = train(cfg, train_s, vocab)
    assert evaluate(params, hyper, test_s, vocab).auc > 0.95


@pytest.mark.slow
def test_regulariser_flattens_slot_utilisation():
    samples, vocab = synthetic.marker_task(1500, n_items=60, n_categories=10, zipf_s=1.1, seed=1)
    base = HyperParams(m=4, d=8, h=8, k_top=2, mlp_widths=[32, 2], memory_init="uniform")

    def g_var(lam):
        cfg = TrainConfig(hyper=base.model_copy(update={"lam": lam}), lr0=0.01, epochs=8, batch_size=64)
        _, report = train(cfg, samples, vocab)
        return report.g_variance

    plain, balanced = g_var(0.0), g_var(5.0)
    assert balanced <= 0.7 * plain


@pytest.mark.slow
def test_component_ablation_ordering():
    samples, vocab = synthetic.marker_task(1500, n_items=60, n_categories=10, zipf_s=1.1, seed=2)
    train_s, test_s = split(samples, SplitPolicy("user_hash", test_fraction=0.2, seed=0))
    hyper = HyperParams(m=4, d=8, h=8, k_top=2, mlp_widths=[32, 16, 2], memory_init="uniform")
    base = TrainConfig(hyper=hyper, lr0=0.01, epochs=8, batch_size=64, seed=0)

    table = ablation.run_ablation(ablation.component_grid(), base, train_s, test_s, vocab).set_index("cell")
    auc = table["auc_mean"]
    # 3 seed 平均。どの cell も 1.0 近くで飽和しうるので 0.01 の幅を許す
    assert auc["mimn_mur"] >= auc["mimn_base"] - 0.01
    assert auc["mimn_mur_miu"] >= auc["mimn_mur"] - 0.01


AMAZON_BOOKS = os.getenv("MIMN_AMAZON_BOOKS")


@pytest.mark.slow
@pytest.mark.skipif(not AMAZON_BOOKS, reason="MIMN_AMAZON_BOOKS is not set")
def test_mimn_beats_embedding_mlp_on_books():
    meta = os.getenv("MIMN_AMAZON_BOOKS_META")
    samples, vocab, _ = ingest(Path(AMAZON_BOOKS), "amazon", 20, 100, meta_path=Path(meta) if meta else None)
    samples = negative_sample(samples[:5000], vocab, seed=0)
    train_s, test_s = split(samples, SplitPolicy("user_hash", test_fraction=0.1, seed=0))
    base = TrainConfig(epochs=20, batch_size=128)

    table = ablation.run_ablation(ablation.model_grid(), base, train_s, test_s, vocab).set_index("cell")
    assert table.loc["mimn", "auc_mean"] >= table.loc["embedding_mlp", "auc_mean"] + 0.005
