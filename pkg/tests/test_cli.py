# tests/test_cli.py
from __future__ import annotations

import configparser
import json

import pytest
from sqlalchemy import select

from app.cli import main
from app.db.models.run import MimnRun, RunStatus
from app.db.session import new_session
from app.schemas.events import Candidate, ScoreRequest
from app.services.data import synthetic
from app.services.data.ingest import events_by_user
from app.services.data.sample_file import write_samples
from app.services.data.sampling import SplitPolicy, split
from app.services.mimn.params import init_mimn_params
from app.services.rtp.serving import handle_request_recompute
from app.services.trainer.checkpoint import save_checkpoint
from app.services.uic.archive import CURRENT_FILE
from app.services.uic.snapshot import decode_snapshot
from app.services.uic.store import ModelRelease

TINY = [
    "--set", "hyper.m=2",
    "--set", "hyper.d=4",
    "--set", "hyper.h=3",
    "--set", "hyper.k_top=1",
    "--set", "hyper.mlp_widths=[8, 2]",
    "--set", "hyper.memory_init=uniform",
]


def _run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr().out.strip()
    return code, (json.loads(out.splitlines()[-1]) if code == 0 and out else None)


def _runs():
    db = new_session()
    try:
        return db.scalars(select(MimnRun).order_by(MimnRun.id)).all()
    finally:
        db.close()


def _write_taobao(path, streams):
    lines = ["user_id,item_id,category_id,behavior_type,timestamp"]
    for user, evs in streams.items():
        lines += [f"{user},{i},{c},pv,{ts}" for i, c, ts in evs]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


# =========================
# exit codes
# =========================
def test_usage_errors_exit_2(capsys, tmp_path):
    assert main(["no-such-command"]) == 2
    assert main(["gradcheck", "--quadratic", "--set", "bogus=1", "--output-dir", str(tmp_path)]) == 2
    assert main(["gradcheck", "--quadratic", "--set", "hyper.m=0", "--output-dir", str(tmp_path)]) == 2
    assert main(["train", "--config", str(tmp_path / "none.ini"), "--output-dir", str(tmp_path)]) == 2


def test_missing_input_file_exits_2(capsys, tmp_path):
    code = main(["ingest", "--input", str(tmp_path / "missing.json"), "--output-dir", str(tmp_path)])
    assert code == 2
    (run,) = _runs()
    assert run.command == "ingest" and run.status == RunStatus.failed.value
    assert "missing.json" in run.error


def test_gradcheck_quadratic_passes(capsys, tmp_path):
    code, result = _run(capsys, "gradcheck", "--quadratic", "--output-dir", tmp_path)
    assert code == 0
    assert result["max_relative_error"] < 1e-8
    assert result["run_id"] == _runs()[0].id


def test_gradcheck_detects_injected_sign_bug(capsys, tmp_path):
    code = main(["gradcheck", "--quadratic", "--inject-sign-bug", "mul", "--output-dir", str(tmp_path)])
    assert code == 1
    assert "gradient check failed" in capsys.readouterr().err
    assert _runs()[0].status == RunStatus.failed.value


def test_gradcheck_on_small_mimn(capsys, tmp_path):
    code, result = _run(
        capsys, "gradcheck", *TINY, "--batch", 3, "--length", 4, "--output-dir", tmp_path
    )
    assert code == 0
    assert result["max_relative_error"] < 1e-4


def test_gradcheck_flags_are_echoed(capsys, tmp_path):
    code = main(["gradcheck", "--quadratic", "--inject-sign-bug", "mul", "--step", "1e-5", "--output-dir", str(tmp_path / "a")])
    assert code == 1
    effective = configparser.ConfigParser(interpolation=None)
    effective.read(tmp_path / "a" / "effective_config.ini", encoding="utf-8")
    assert effective["gradcheck"]["quadratic"] == "true"
    assert effective["gradcheck"]["inject_sign_bug"] == "mul"
    assert float(effective["gradcheck"]["step"]) == 1e-5
    assert "max_entries" not in effective["gradcheck"]

    # echo された config だけで同じ失敗になる
    rerun = ["gradcheck", "--config", str(tmp_path / "a" / "effective_config.ini"), "--output-dir", str(tmp_path / "b")]
    assert main(rerun) == 1
    assert "gradient check failed" in capsys.readouterr().err


# =========================
# ingest / train / evaluate
# =========================
def test_ingest_train_evaluate_pipeline(capsys, tmp_path, fixtures_dir):
    data_dir = tmp_path / "data"
    code, result = _run(
        capsys, "ingest",
        "--input", fixtures_dir / "amazon_reviews.json",
        "--meta", fixtures_dir / "amazon_meta.json",
        "--format", "amazon",
        "--set", "data.min_len=3",
        "--output-dir", data_dir,
    )
    assert code == 0
    assert result["samples"] == 4
    assert result["stats"]["rows_malformed"] == 2
    assert (data_dir / "samples.jsonl").exists()

    model_dir = tmp_path / "model"
    code, result = _run(
        capsys, "train", *TINY, "--samples", data_dir / "samples.jsonl", "--seed", 3, "--output-dir", model_dir
    )
    assert code == 0
    assert (model_dir / "checkpoint.safetensors").exists()
    lines = (model_dir / "metrics.jsonl").read_text(encoding="utf-8").splitlines()
    assert json.loads(lines[-1])["record"] == "summary"

    effective = configparser.ConfigParser(interpolation=None)
    effective.read(model_dir / "effective_config.ini", encoding="utf-8")
    assert effective["run"]["command"] == "train"
    assert effective["hyper"]["m"] == "2"
    assert effective["hyper"]["mlp_widths"] == "[8, 2]"
    assert effective["train"]["seed"] == "3"

    code, result = _run(
        capsys, "evaluate",
        "--checkpoint", model_dir / "checkpoint.safetensors",
        "--samples", data_dir / "samples.jsonl",
        "--output-dir", tmp_path / "eval",
    )
    assert code == 0
    assert 0.0 <= result["auc"] <= 1.0

    assert [r.command for r in _runs()] == ["ingest", "train", "evaluate"]
    assert all(r.status == RunStatus.success.value for r in _runs())


def test_echoed_config_reproduces_training(capsys, tmp_path):
    first, second = tmp_path / "first", tmp_path / "second"
    code, a = _run(
        capsys, "train", *TINY,
        "--synthetic", "marker", "--synthetic-samples", 80, "--seed", 5,
        "--set", "train.epochs=1", "--set", "train.batch_size=16",
        "--output-dir", first,
    )
    assert code == 0
    effective = configparser.ConfigParser(interpolation=None)
    effective.read(first / "effective_config.ini", encoding="utf-8")
    assert effective["data"]["synthetic"] == "marker"
    assert effective["data"]["synthetic_samples"] == "80"
    assert effective["data"]["test_fraction"] == "0.2"

    code, b = _run(capsys, "train", "--config", first / "effective_config.ini", "--output-dir", second)
    assert code == 0
    assert (b["auc"], b["final_loss"], b["steps"]) == (a["auc"], a["final_loss"], a["steps"])
    assert (second / "checkpoint.safetensors").read_bytes() == (first / "checkpoint.safetensors").read_bytes()


def test_synthetic_split_follows_test_fraction(capsys, tmp_path):
    samples, _ = synthetic.marker_task(80, seed=0)
    expected = split(samples, SplitPolicy("user_hash", test_fraction=0.5, seed=0))
    code, result = _run(
        capsys, "train", *TINY,
        "--synthetic", "marker", "--synthetic-samples", 80,
        "--set", "data.test_fraction=0.5", "--set", "train.epochs=1", "--set", "train.batch_size=8",
        "--output-dir", tmp_path,
    )
    assert code == 0
    assert len(expected[1]) > 0
    # 80 件中 test 側に回った分だけ学習 step が減る
    assert result["steps"] == -(-len(expected[0]) // 8)


def test_train_on_synthetic_task(capsys, tmp_path):
    code, result = _run(
        capsys, "train", *TINY,
        "--synthetic", "marker", "--synthetic-samples", 80,
        "--set", "train.epochs=1", "--set", "train.batch_size=16",
        "--output-dir", tmp_path,
    )
    assert code == 0
    assert result["model"] == "mimn"
    assert result["steps"] > 0
    assert result["checkpoint"].endswith("checkpoint.safetensors")


def test_ablate_command(capsys, tmp_path):
    code, result = _run(
        capsys, "ablate", *TINY,
        "--synthetic", "marker", "--synthetic-samples", 60,
        "--grid", "models", "--repeats", 2,
        "--set", "train.epochs=1",
        "--output-dir", tmp_path,
    )
    assert code == 0
    assert result["cells"] == 2
    assert (tmp_path / "ablation.csv").exists()
    assert "±" in (tmp_path / "ablation.txt").read_text(encoding="utf-8")


# =========================
# serving commands
# =========================
@pytest.fixture
def serving_setup(tmp_path, stream_release, streams_and_vocab):
    streams, vocab = streams_and_vocab
    ckpt = save_checkpoint(tmp_path / "ck.safetensors", stream_release.params, stream_release.hyper, vocab)
    events = _write_taobao(tmp_path / "events.csv", streams)
    requests = tmp_path / "requests.jsonl"
    reqs = [
        ScoreRequest(user_id="u0", candidates=[Candidate(item_id="i1", category_id="c1"), Candidate(item_id="i7", category_id="c1")]),
        ScoreRequest(user_id="ghost", candidates=[Candidate(item_id="i2", category_id="c2")]),
    ]
    requests.write_text("\n".join(r.model_dump_json() for r in reqs) + "\n", encoding="utf-8")
    common = ["--checkpoint", ckpt, "--state-dir", tmp_path / "state"]
    return {"common": common, "events": events, "requests": requests, "reqs": reqs, "tmp": tmp_path}


def test_serve_sim_matches_full_replay(capsys, serving_setup, stream_release):
    s = serving_setup
    out = s["tmp"] / "serve"
    code, result = _run(
        capsys, "serve-sim", *s["common"],
        "--events", s["events"], "--format", "taobao", "--requests", s["requests"],
        "--output-dir", out,
    )
    assert code == 0
    assert result["events_rejected"] == 0
    assert result["requests"] == 2 and result["cold_start_requests"] == 1

    responses = [json.loads(line) for line in (out / "scores.jsonl").read_text(encoding="utf-8").splitlines()]
    log = events_by_user(s["events"], "taobao")["u0"]
    assert responses[0]["scores"] == handle_request_recompute(s["reqs"][0], log, stream_release)
    assert responses[1]["scores"] == handle_request_recompute(s["reqs"][1], [], stream_release)
    assert (out / "bench.csv").exists()
    assert (s["tmp"] / "state" / CURRENT_FILE).exists()


def test_snapshot_and_rollback_commands(capsys, serving_setup):
    s = serving_setup
    current = s["tmp"] / "state" / CURRENT_FILE
    code, _ = _run(capsys, "warm-up", *s["common"], "--events", s["events"], "--format", "taobao", "--output-dir", s["tmp"] / "w")
    assert code == 0
    _, warm = decode_snapshot(current.read_bytes())[:2]

    code, snap = _run(capsys, "snapshot", *s["common"], "--output-dir", s["tmp"] / "s")
    assert code == 0 and snap["user_count"] == 6

    # イベントをもう一度流して状態を進める
    code, _ = _run(
        capsys, "serve-sim", *s["common"],
        "--events", s["events"], "--format", "taobao", "--requests", s["requests"],
        "--output-dir", s["tmp"] / "serve",
    )
    assert code == 0
    _, moved = decode_snapshot(current.read_bytes())[:2]
    assert not moved["u0"].same_as(warm["u0"])

    code, result = _run(capsys, "rollback", *s["common"], snap["snapshot_id"], "--output-dir", s["tmp"] / "r")
    assert code == 0 and result["restored_users"] == 6
    _, back = decode_snapshot(current.read_bytes())[:2]
    assert all(back[u].same_as(warm[u]) for u in warm)

    assert main(["rollback", *map(str, s["common"]), "snap-unknown", "--output-dir", str(s["tmp"] / "r2")]) == 1


def test_serving_commands_need_a_checkpoint(capsys, tmp_path):
    assert main(["snapshot", "--state-dir", str(tmp_path / "state"), "--output-dir", str(tmp_path)]) == 2


def test_outsync_command(capsys, tmp_path, tiny_hyper):
    samples, vocab = synthetic.marker_task(30, n_items=20, n_categories=5, seed=2)
    old = init_mimn_params(tiny_hyper, vocab.n_items, vocab.n_categories, seed=1).copy(version=1)
    new = init_mimn_params(tiny_hyper, vocab.n_items, vocab.n_categories, seed=2).copy(version=2)
    save_checkpoint(tmp_path / "old.safetensors", old, tiny_hyper, vocab)
    save_checkpoint(tmp_path / "new.safetensors", new, tiny_hyper, vocab)
    write_samples(tmp_path / "s.jsonl", samples, vocab)

    code, result = _run(
        capsys, "outsync",
        "--old", tmp_path / "old.safetensors", "--new", tmp_path / "new.safetensors",
        "--samples", tmp_path / "s.jsonl", "--output-dir", tmp_path / "o",
    )
    assert code == 0
    assert (result["uic_version"], result["scorer_version"]) == (1, 2)
    assert result["delta"] == pytest.approx(result["auc_outsync"] - result["auc_sync"])


def test_bench_command_writes_tables(capsys, tmp_path):
    code, result = _run(
        capsys, "bench", *TINY,
        "--history-lens", "5,10", "--modes", "uic",
        "--set", "bench.duration=0.2", "--set", "bench.users=3", "--set", "bench.request_rate=20",
        "--output-dir", tmp_path,
    )
    assert code == 0
    assert [r["history_len"] for r in result["rows"]] == [5, 10]
    assert result["crossover_length"] > 0
    for name in ("bench.csv", "bench.txt", "storage.csv"):
        assert (tmp_path / name).exists()
    effective = configparser.ConfigParser(interpolation=None)
    effective.read(tmp_path / "effective_config.ini", encoding="utf-8")
    assert effective["sweep"]["history_lens"] == "[5, 10]"
    assert effective["sweep"]["modes"] == '["uic"]'
    assert effective["bench"]["users"] == "3"


def test_release_helper_matches_checkpoint(tmp_path, stream_release, streams_and_vocab):
    _, vocab = streams_and_vocab
    from app.cli import _release

    path = save_checkpoint(tmp_path / "ck.safetensors", stream_release.params, stream_release.hyper, vocab)
    release = _release(path)
    assert isinstance(release, ModelRelease)
    assert release.params.equals(stream_release.params)
    assert release.encode("i3", "c3") == stream_release.encode("i3", "c3")
