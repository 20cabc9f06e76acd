# app/cli.py
"""
MIMN / UIC の運用コマンド。

    python -m app.cli <command> [--config run.ini] [--set section.key=value ...]

各コマンドは effective_config.ini を output_dir に書き、mimn_runs に1行残す。
終了コード: 0 成功 / 1 実行時エラー / 2 設定・使い方・入力ファイルのエラー
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from app.core.config import config_sections, load_run_config, write_effective_config
from app.core.errors import ConfigError, DataError, GradientCheckError
from app.core.logging import setup_logging
from app.db.models.run import RunType
from app.db.session import new_session
from app.schemas.config import HyperParams, RunConfig
from app.schemas.events import BehaviorEvent, ScoreRequest, ScoreResponse
from app.services.data import sample_file, synthetic
from app.services.data.ingest import events_by_user, ingest
from app.services.data.sampling import SplitPolicy, negative_sample, split
from app.services.data.types import Sample
from app.services.data.vocab import Vocabulary
from app.services.gradcore import flipped_backward, gradient_errors, primitive_names
from app.services.gradcore.tape import Tape
from app.services.mimn.model import build_loss
from app.services.mimn.params import init_mimn_params
from app.services.mimn.state import state_nbytes
from app.services.pipeline.runner import execute_step
from app.services.rtp.bench import BenchReport, BenchRow, load_profile, run_sweep
from app.services.rtp.outsync import simulate_out_sync
from app.services.rtp.serving import score_state
from app.services.rtp.storage import storage_report
from app.services.trainer.ablation import GRIDS, run_ablation
from app.services.trainer.checkpoint import load_checkpoint, save_checkpoint
from app.services.trainer.metrics import MetricReport
from app.services.trainer.train import evaluate, train
from app.services.uic.archive import SnapshotArchive
from app.services.uic.store import ModelRelease, StateStore

logger = logging.getLogger("app.cli")

CHECKPOINT_FILE = "checkpoint.safetensors"
QUADRATIC_THRESHOLD = 1e-8

Step = Callable[[RunConfig, argparse.Namespace], Dict[str, Any]]


# =========================
# helpers
# =========================
def _require(value: Optional[Path], name: str) -> Path:
    if value is None:
        raise ConfigError(f"{name} is required")
    return Path(value)


def _checkpoint_path(cfg: RunConfig) -> Path:
    if cfg.serve.checkpoint is not None:
        return Path(cfg.serve.checkpoint)
    env = os.getenv("MIMN_CHECKPOINT")
    if env:
        return Path(env)
    raise ConfigError("serve.checkpoint is required (or set MIMN_CHECKPOINT)")


def _release(path: Path) -> ModelRelease:
    ckpt = load_checkpoint(path)
    return ModelRelease(params=ckpt.params, hyper=ckpt.hyper, vocab=ckpt.vocab)


def _open_store(cfg: RunConfig) -> Tuple[StateStore, SnapshotArchive]:
    """checkpoint と state_dir から store を組み立て、current.uic があれば読み込む。"""
    release = _release(_checkpoint_path(cfg))
    archive = SnapshotArchive(cfg.serve.state_dir)
    store = StateStore(release, retention=cfg.serve.retention, archive=archive)
    blob = archive.read_current()
    if blob is not None:
        restored = store.restore_blob(blob)
        logger.info("loaded %d user states from %s", restored, archive.current_path)
    return store, archive


def _save_current(store: StateStore, archive: SnapshotArchive) -> Path:
    return archive.write_current(store.encode_states("current").blob)


def _training_data(cfg: RunConfig) -> Tuple[List[Sample], List[Sample], Vocabulary]:
    data = cfg.data
    if data.synthetic == "marker":
        samples, vocab = synthetic.marker_task(data.synthetic_samples, seed=cfg.seed)
        train_s, test_s = split(samples, SplitPolicy("user_hash", test_fraction=data.test_fraction, seed=cfg.seed))
        return train_s, test_s, vocab

    train_s, vocab = sample_file.read_samples(_require(cfg.data.samples_path, "data.samples_path"))
    test_s: List[Sample] = []
    if cfg.data.test_path is not None:
        test_s, test_vocab = sample_file.read_samples(cfg.data.test_path)
        if test_vocab != vocab:
            raise DataError("train and test sample files carry different vocabularies")
    return train_s, test_s, vocab


def _read_requests(path: Path) -> List[ScoreRequest]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"request file not found: {path}")
    out: List[ScoreRequest] = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                out.append(ScoreRequest.model_validate_json(line))
            except ValueError as e:
                raise DataError(f"{path}:{lineno}: bad score request ({e})") from None
    return out


def _event_stream(cfg: RunConfig) -> Dict[str, List[Tuple[str, str, int]]]:
    path = _require(cfg.serve.events_path or cfg.data.path, "serve.events_path")
    return events_by_user(path, cfg.data.format, meta_path=cfg.data.meta_path)


# =========================
# commands
# =========================
def cmd_ingest(cfg: RunConfig, args: argparse.Namespace) -> Dict[str, Any]:
    data = cfg.data
    samples, vocab, stats = ingest(
        _require(data.path, "data.path"),
        data.format,
        data.min_len,
        data.max_len,
        meta_path=data.meta_path,
        exclude_ranges=[tuple(r) for r in data.exclude_ranges],
    )
    if data.negatives:
        samples = negative_sample(samples, vocab, cfg.seed)

    out = Path(cfg.output_dir)
    policy = SplitPolicy(data.split_policy, data.test_fraction, cfg.seed, data.time_cutoff)
    train_s, test_s = split(samples, policy)
    sample_file.write_samples(out / "samples.jsonl", samples, vocab)
    sample_file.write_samples(out / "train.jsonl", train_s, vocab)
    sample_file.write_samples(out / "test.jsonl", test_s, vocab)
    return {
        "samples": len(samples),
        "train": len(train_s),
        "test": len(test_s),
        "items": len(vocab.items),
        "categories": len(vocab.categories),
        "stats": stats.as_dict(),
    }


def _write_report(out: Path, report: MetricReport) -> Dict[str, Any]:
    report.write(out / "metrics.jsonl")
    return report.summary()


def cmd_train(cfg: RunConfig, args: argparse.Namespace) -> Dict[str, Any]:
    train_s, test_s, vocab = _training_data(cfg)
    params, report = train(cfg.train, train_s, vocab, test_s or None)
    out = Path(cfg.output_dir)
    ckpt = save_checkpoint(out / CHECKPOINT_FILE, params, cfg.hyper, vocab)
    result = _write_report(out, report)
    result["checkpoint"] = str(ckpt)
    return result


def cmd_evaluate(cfg: RunConfig, args: argparse.Namespace) -> Dict[str, Any]:
    ckpt = load_checkpoint(_checkpoint_path(cfg))
    samples, vocab = sample_file.read_samples(
        _require(cfg.data.test_path or cfg.data.samples_path, "data.test_path")
    )
    if ckpt.vocab is not None:
        vocab = ckpt.vocab
    report = evaluate(ckpt.params, ckpt.hyper, samples, vocab)
    return _write_report(Path(cfg.output_dir), report)


def cmd_ablate(cfg: RunConfig, args: argparse.Namespace) -> Dict[str, Any]:
    train_s, test_s, vocab = _training_data(cfg)
    if not test_s:
        raise ConfigError("ablation needs a test set (data.test_path or data.synthetic)")
    grid = GRIDS[cfg.ablation.grid]()
    df = run_ablation(grid, cfg.train, train_s, test_s, vocab, repeats=cfg.ablation.repeats)

    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    df.to_csv(out / "ablation.csv", index=False)
    text = df.drop(columns=[c for c in df.columns if c.startswith("hyper.")]).to_string(index=False)
    (out / "ablation.txt").write_text(text + "\n", encoding="utf-8")
    print(text, file=sys.stderr)
    return {"grid": cfg.ablation.grid, "cells": len(df), "rows": json.loads(df.to_json(orient="records"))}


def _gradcheck_problem(hyper: HyperParams, batch_size: int, length: int, seed: int):
    samples, vocab = synthetic.marker_task(
        batch_size, n_items=20, n_categories=5, min_len=length, max_len=length, seed=seed
    )
    batch = vocab.encode_batch(samples, profile_dim=hyper.profile_dim)
    params = init_mimn_params(hyper, vocab.n_items, vocab.n_categories, seed)

    def loss_fn(tape: Tape, bound):
        loss, _ = build_loss(tape, bound, hyper, batch)
        return loss

    return loss_fn, params


def _quadratic_problem(seed: int):
    x = np.random.default_rng(seed).normal(size=(5, 3))

    def loss_fn(tape: Tape, bound):
        return tape.reduce_sum(tape.mul(bound["x"], bound["x"]))

    return loss_fn, {"x": x}


def cmd_gradcheck(cfg: RunConfig, args: argparse.Namespace) -> Dict[str, Any]:
    gc = cfg.gradcheck
    if gc.inject_sign_bug is not None and gc.inject_sign_bug not in primitive_names():
        raise ConfigError(f"gradcheck.inject_sign_bug: unknown primitive {gc.inject_sign_bug!r}")
    if gc.quadratic:
        loss_fn, params = _quadratic_problem(cfg.seed)
        threshold = QUADRATIC_THRESHOLD
    else:
        loss_fn, params = _gradcheck_problem(cfg.hyper, gc.batch, gc.length, cfg.seed)
        threshold = gc.threshold

    def run() -> Dict[str, float]:
        return gradient_errors(loss_fn, params, step=gc.step, max_entries=gc.max_entries, seed=cfg.seed)

    t0 = time.perf_counter()
    if gc.inject_sign_bug:
        logger.warning("gradcheck: backward of %r is sign-flipped", gc.inject_sign_bug)
        with flipped_backward(gc.inject_sign_bug):
            errors = run()
    else:
        errors = run()
    seconds = time.perf_counter() - t0

    worst = max(errors, key=errors.get) if errors else ""
    max_error = errors[worst] if errors else 0.0
    logger.info("gradcheck: max relative error %.3e (%s) in %.1fs", max_error, worst or "-", seconds)
    if not max_error < threshold:
        raise GradientCheckError(max_error, threshold, worst)
    return {"max_relative_error": max_error, "worst": worst, "threshold": threshold, "seconds": seconds}


def cmd_warm_up(cfg: RunConfig, args: argparse.Namespace) -> Dict[str, Any]:
    store, archive = _open_store(cfg)
    result = store.warm_up(_event_stream(cfg))
    path = _save_current(store, archive)
    return {"initialized": result.initialized, "failed": len(result.failed), "users": len(store), "state": str(path)}


def cmd_serve_sim(cfg: RunConfig, args: argparse.Namespace) -> Dict[str, Any]:
    """
    イベントを user ごとの時刻順に UIC へ流し、その後リクエストを採点する。
    scores.jsonl と bench.csv（採点レイテンシ）を書く。
    """
    store, archive = _open_store(cfg)
    streams = _event_stream(cfg) if (cfg.serve.events_path or cfg.data.path) else {}
    events = [
        BehaviorEvent(user_id=u, item_id=i, category_id=c, timestamp=ts)
        for u, evs in streams.items()
        for i, c, ts in evs
    ]
    applied, errors = store.apply_events(events)
    requests = _read_requests(_require(cfg.serve.requests_path, "serve.requests_path"))

    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    lat: List[float] = []
    cold = 0
    with open(out / "scores.jsonl", "w", encoding="utf-8") as f:
        for req in requests:
            t0 = time.perf_counter()
            state = store.get_state(req.user_id)
            scores = score_state(req, state, store.release)
            lat.append((time.perf_counter() - t0) * 1000.0)
            cold += int(state.t == 0)
            resp = ScoreResponse(
                user_id=req.user_id,
                scores=scores,
                param_version=store.param_version,
                state_version=state.version,
            )
            f.write(resp.model_dump_json() + "\n")

    lat_ms = np.asarray(lat)
    row = BenchRow(mode="uic", history_len=max((len(v) for v in streams.values()), default=0))
    if lat_ms.size:
        row.p50, row.p90, row.p99 = (float(v) for v in np.percentile(lat_ms, [50, 90, 99]))
        row.mean = float(lat_ms.mean())
    row.requests = len(requests)
    row.events = applied
    row.bytes_per_user = state_nbytes(store.hyper)
    report = BenchReport([row])
    report.to_csv(out / "bench.csv")

    result: Dict[str, Any] = {
        "events_applied": applied,
        "events_rejected": len(errors),
        "requests": len(requests),
        "cold_start_requests": cold,
        "p99_ms": row.p99,
    }
    if cfg.serve.snapshot_at_end:
        result["snapshot_id"] = store.snapshot().snapshot_id
    result["state"] = str(_save_current(store, archive))
    return result


def cmd_bench(cfg: RunConfig, args: argparse.Namespace) -> Dict[str, Any]:
    profile = cfg.bench
    lengths = cfg.sweep.history_lens

    streams, vocab = synthetic.user_streams(profile.users, max(lengths), seed=profile.seed)
    if cfg.serve.checkpoint is not None or os.getenv("MIMN_CHECKPOINT"):
        release = _release(_checkpoint_path(cfg))
    else:
        params = init_mimn_params(cfg.hyper, vocab.n_items, vocab.n_categories, cfg.seed)
        release = ModelRelease(params=params, hyper=cfg.hyper, vocab=vocab)

    report = run_sweep(profile, streams, release, lengths, modes=list(cfg.sweep.modes))
    out = Path(cfg.output_dir)
    report.to_csv(out / "bench.csv")
    (out / "bench.txt").write_text(report.to_text() + "\n", encoding="utf-8")
    storage = storage_report(StateStore(release), lengths)
    storage.to_csv(out / "storage.csv", index=False)
    print(report.to_text(), file=sys.stderr)
    return {
        "rows": json.loads(report.to_frame().to_json(orient="records")),
        "crossover_length": int(storage.attrs["crossover_length"]),
    }


def cmd_snapshot(cfg: RunConfig, args: argparse.Namespace) -> Dict[str, Any]:
    store, _ = _open_store(cfg)
    meta = store.snapshot().meta
    return {
        "snapshot_id": meta.snapshot_id,
        "user_count": meta.user_count,
        "checksum": meta.checksum,
        "size_bytes": meta.size_bytes,
        "retained": [m.snapshot_id for m in store.catalog()],
    }


def cmd_rollback(cfg: RunConfig, args: argparse.Namespace) -> Dict[str, Any]:
    store, archive = _open_store(cfg)
    snapshot_id = cfg.serve.rollback_to
    if not snapshot_id:
        raise ConfigError("serve.rollback_to (snapshot id) is required")
    restored = store.rollback(snapshot_id)
    _save_current(store, archive)
    return {"snapshot_id": snapshot_id, "restored_users": restored}


def cmd_outsync(cfg: RunConfig, args: argparse.Namespace) -> Dict[str, Any]:
    old = _release(_require(cfg.serve.stale_checkpoint, "serve.stale_checkpoint"))
    new = _release(_checkpoint_path(cfg))
    samples, _ = sample_file.read_samples(_require(cfg.data.test_path or cfg.data.samples_path, "data.test_path"))
    return simulate_out_sync(old, new, samples).as_dict()


COMMANDS: Dict[str, Tuple[RunType, Step]] = {
    "ingest": (RunType.ingest, cmd_ingest),
    "train": (RunType.train, cmd_train),
    "evaluate": (RunType.evaluate, cmd_evaluate),
    "ablate": (RunType.ablate, cmd_ablate),
    "gradcheck": (RunType.gradcheck, cmd_gradcheck),
    "warm-up": (RunType.warm_up, cmd_warm_up),
    "serve-sim": (RunType.serve_sim, cmd_serve_sim),
    "bench": (RunType.bench, cmd_bench),
    "snapshot": (RunType.snapshot, cmd_snapshot),
    "rollback": (RunType.rollback, cmd_rollback),
    "outsync": (RunType.outsync, cmd_outsync),
}


# =========================
# argument parsing
# =========================
def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="INI run config")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE")
    p.add_argument("--output-dir", type=Path)
    p.add_argument("--seed", type=int)


def _checkpoint_arg(p: argparse.ArgumentParser) -> None:
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--state-dir", type=Path)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mimn", description="MIMN training and UIC serving tools")
    parser.add_argument("--log-level", default=None)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="behavior log -> sample files")
    _common(p)
    p.add_argument("--input", type=Path)
    p.add_argument("--meta", type=Path)
    p.add_argument("--format", choices=["amazon", "taobao"])

    for name in ("train", "ablate"):
        p = sub.add_parser(name)
        _common(p)
        p.add_argument("--samples", type=Path)
        p.add_argument("--test", type=Path)
        p.add_argument("--synthetic", choices=["marker"], help="use the marker-category synthetic task")
        p.add_argument("--synthetic-samples", type=int)
        if name == "ablate":
            p.add_argument("--grid", choices=sorted(GRIDS))
            p.add_argument("--repeats", type=int)

    p = sub.add_parser("evaluate")
    _common(p)
    _checkpoint_arg(p)
    p.add_argument("--samples", type=Path)

    p = sub.add_parser("gradcheck", help="analytic vs finite-difference gradients")
    _common(p)
    p.add_argument("--batch", type=int)
    p.add_argument("--length", type=int)
    p.add_argument("--step", type=float)
    p.add_argument("--max-entries", type=int, help="sample this many coordinates per parameter (default: all)")
    p.add_argument("--threshold", type=float)
    p.add_argument("--quadratic", action="store_true", default=None, help="sanity check on sum(x*x)")
    p.add_argument(
        "--inject-sign-bug",
        nargs="?",
        const="cosine",
        choices=primitive_names(),
        help="flip the backward sign of one primitive",
    )

    for name in ("warm-up", "serve-sim"):
        p = sub.add_parser(name)
        _common(p)
        _checkpoint_arg(p)
        p.add_argument("--events", type=Path)
        p.add_argument("--format", choices=["amazon", "taobao"])
        if name == "serve-sim":
            p.add_argument("--requests", type=Path)
            p.add_argument("--snapshot-at-end", action="store_true", default=None)

    p = sub.add_parser("bench")
    _common(p)
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--profile", type=Path, help="key=value load profile")
    p.add_argument("--history-lens", help="comma separated, e.g. 100,400,1000")
    p.add_argument("--modes", help="comma separated subset of uic,recompute")

    p = sub.add_parser("snapshot")
    _common(p)
    _checkpoint_arg(p)

    p = sub.add_parser("rollback")
    _common(p)
    _checkpoint_arg(p)
    p.add_argument("snapshot_id", nargs="?")

    p = sub.add_parser("outsync")
    _common(p)
    p.add_argument("--old", type=Path, help="checkpoint the UIC states were built with")
    p.add_argument("--new", type=Path, help="checkpoint the scorer runs")
    p.add_argument("--samples", type=Path)
    return parser


# 個別フラグは --set と同じ override に変換して effective config に残す
_FLAG_OVERRIDES = {
    "output_dir": "run.output_dir",
    "input": "data.path",
    "meta": "data.meta_path",
    "format": "data.format",
    "samples": "data.samples_path",
    "test": "data.test_path",
    "checkpoint": "serve.checkpoint",
    "state_dir": "serve.state_dir",
    "events": "serve.events_path",
    "requests": "serve.requests_path",
    "snapshot_at_end": "serve.snapshot_at_end",
    "snapshot_id": "serve.rollback_to",
    "old": "serve.stale_checkpoint",
    "new": "serve.checkpoint",
    "synthetic": "data.synthetic",
    "synthetic_samples": "data.synthetic_samples",
    "grid": "ablation.grid",
    "repeats": "ablation.repeats",
    "batch": "gradcheck.batch",
    "length": "gradcheck.length",
    "step": "gradcheck.step",
    "max_entries": "gradcheck.max_entries",
    "threshold": "gradcheck.threshold",
    "quadratic": "gradcheck.quadratic",
    "inject_sign_bug": "gradcheck.inject_sign_bug",
}
# カンマ区切りのフラグは JSON リストとして渡す
_LIST_FLAGS = {
    "history_lens": ("sweep.history_lens", int),
    "modes": ("sweep.modes", str),
}


def _flag_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def _list_flag(flag: str, raw: str, cast: Callable[[str], Any]) -> str:
    try:
        items = [cast(v.strip()) for v in raw.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"--{flag.replace('_', '-')}: cannot parse {raw!r}") from None
    return json.dumps(items)


def flag_overrides(args: argparse.Namespace) -> List[str]:
    """
    コマンドラインを override 列に直す。優先順: config file < --profile < --set < 個別フラグ。
    結果の全値が effective_config.ini に残るので、--config だけで再実行できる。
    """
    out = [f"run.command={args.command}"]
    if getattr(args, "profile", None) is not None:
        profile = load_profile(args.profile)
        out.extend(f"bench.{k}={_flag_value(v)}" for k, v in profile.model_dump().items())
    out.extend(args.overrides)
    for attr, key in _FLAG_OVERRIDES.items():
        value = getattr(args, attr, None)
        if value is not None:
            out.append(f"{key}={_flag_value(value)}")
    for attr, (key, cast) in _LIST_FLAGS.items():
        raw = getattr(args, attr, None)
        if raw is not None:
            out.append(f"{key}={_list_flag(attr, raw, cast)}")
    if getattr(args, "seed", None) is not None:
        out += [f"run.seed={args.seed}", f"train.seed={args.seed}"]
    return out


def run_command(args: argparse.Namespace) -> Dict[str, Any]:
    cfg = load_run_config(args.config, flag_overrides(args))
    run_type, step = COMMANDS[args.command]
    write_effective_config(cfg)

    db = new_session()
    try:
        out = execute_step(
            db,
            run_type,
            lambda _params: step(cfg, args),
            params=config_sections(cfg),
            output_dir=str(cfg.output_dir),
        )
    finally:
        db.close()
    result = dict(out["result"])
    result["run_id"] = out["run_id"]
    return result


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if isinstance(e.code, int) else 2
    setup_logging(args.log_level)

    try:
        result = run_command(args)
    except (ConfigError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception as e:
        logger.debug("command %s failed", args.command, exc_info=True)
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1

    print(json.dumps(result, ensure_ascii=False, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
