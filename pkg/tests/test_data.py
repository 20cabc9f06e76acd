# tests/test_data.py
from __future__ import annotations

import json

import pytest

from app.core.errors import DataError, UnknownIdError
from app.services.data import synthetic
from app.services.data.ingest import events_by_user, ingest, read_events
from app.services.data.sample_file import read_samples, write_samples
from app.services.data.sampling import SplitPolicy, negative_sample, split, user_bucket
from app.services.data.types import Sample
from app.services.data.vocab import OOV, Vocabulary


# =========================
# ingest
# =========================
def test_amazon_ingest(fixtures_dir):
    samples, vocab, stats = ingest(
        fixtures_dir / "amazon_reviews.json", "amazon", min_len=3, max_len=10,
        meta_path=fixtures_dir / "amazon_meta.json",
    )
    by_user = {s.user_id: s for s in samples}
    assert set(by_user) == {"U1", "U2"}

    u1 = by_user["U1"]
    # B003 の連続重複は1件にまとまる
    assert u1.history == (("B001", "Fiction"), ("B002", "History"), ("B003", "Fiction"))
    assert u1.target == ("B004", "Science")
    assert u1.target_timestamp == 400
    assert u1.label == 1

    # 時刻順に並べ替えられ、metadata の無い item は unknown
    u2 = by_user["U2"]
    assert u2.history == (("B001", "Fiction"), ("B002", "History"))
    assert u2.target == ("B005", "unknown")

    assert stats.rows_read == 13
    assert stats.rows_malformed == 2
    assert stats.missing_category == 1
    assert stats.users_seen == 3
    assert stats.users_dropped == 1
    assert stats.samples == 2
    assert len(vocab) == 5
    assert sorted(vocab.categories) == ["Fiction", "History", "Science", "unknown"]


def test_max_len_keeps_most_recent_events(fixtures_dir):
    samples, _, _ = ingest(
        fixtures_dir / "amazon_reviews.json", "amazon", min_len=3, max_len=2,
        meta_path=fixtures_dir / "amazon_meta.json",
    )
    u1 = next(s for s in samples if s.user_id == "U1")
    assert [i for i, _ in u1.history] == ["B002", "B003"]


def test_taobao_ingest(fixtures_dir):
    samples, vocab, stats = ingest(fixtures_dir / "taobao.csv", "taobao", min_len=3, max_len=10)
    assert len(samples) == 1
    s = samples[0]
    assert s.user_id == "1"
    assert s.history == (("10", "100"), ("11", "101"))
    assert s.target == ("13", "102")
    assert stats.rows_read == 10
    assert stats.rows_malformed == 3
    assert stats.rows_filtered == 2
    assert stats.users_dropped == 1


def test_exclusion_window_drops_events(fixtures_dir):
    # U1 の 300〜400 を落とすと B001, B002 の2件だけになり min_len=3 を下回る
    samples, _, stats = ingest(
        fixtures_dir / "amazon_reviews.json", "amazon", min_len=3, max_len=10,
        meta_path=fixtures_dir / "amazon_meta.json", exclude_ranges=[(300, 401)],
    )
    assert {s.user_id for s in samples} == {"U2"}
    assert stats.rows_filtered == 4


def test_ingest_errors(fixtures_dir, tmp_path):
    with pytest.raises(FileNotFoundError):
        read_events(tmp_path / "missing.csv", "taobao")
    with pytest.raises(DataError):
        read_events(fixtures_dir / "taobao.csv", "parquet")
    with pytest.raises(DataError):
        ingest(fixtures_dir / "taobao.csv", "taobao", min_len=50, max_len=100)


def test_ingest_is_deterministic(fixtures_dir):
    a = ingest(fixtures_dir / "amazon_reviews.json", "amazon", 3, 10, fixtures_dir / "amazon_meta.json")
    b = ingest(fixtures_dir / "amazon_reviews.json", "amazon", 3, 10, fixtures_dir / "amazon_meta.json")
    assert a[0] == b[0]
    assert a[1] == b[1]


def test_events_by_user_keeps_short_users(fixtures_dir):
    streams = events_by_user(fixtures_dir / "taobao.csv", "taobao")
    assert streams["2"] == [("10", "100", 1000), ("11", "101", 1005)]


# =========================
# vocabulary / negatives / split
# =========================
def test_vocabulary_reserves_oov():
    vocab = Vocabulary.from_pairs([("a", "x"), ("b", "y"), ("a", "x")])
    assert vocab.n_items == 3 and vocab.n_categories == 3
    assert vocab.item("a") == 1 and vocab.item("zzz") == OOV
    with pytest.raises(UnknownIdError):
        vocab.item("zzz", policy="reject")
    assert Vocabulary.from_header(vocab.to_header()) == vocab


def _samples(n_users=40, hist=5, n_items=30):
    out = []
    for u in range(n_users):
        history = tuple((f"i{(u + k) % n_items}", "c0") for k in range(hist))
        out.append(Sample(f"u{u}", history, (f"i{(u + hist) % n_items}", "c0"), 1, 1000 + u))
    return out


def test_negative_sampling_pairs_and_exclusions():
    samples = _samples()
    vocab = Vocabulary.from_samples(samples)
    out = negative_sample(samples, vocab, seed=3)
    assert len(out) == 2 * len(samples)
    for pos, neg in zip(out[0::2], out[1::2]):
        assert (pos.label, neg.label) == (1, 0)
        assert neg.history == pos.history
        assert neg.target[0] not in {i for i, _ in pos.history}
        assert neg.target[0] != pos.target[0]
    assert out == negative_sample(samples, vocab, seed=3)


def test_negative_sampling_impossible():
    s = Sample("u", (("a", "x"),), ("b", "x"), 1)
    with pytest.raises(DataError):
        negative_sample([s], Vocabulary.from_samples([s]), seed=0)


def test_user_hash_split_is_by_user_and_stable():
    samples = _samples(200)
    policy = SplitPolicy("user_hash", test_fraction=0.25, seed=7)
    train, test = split(samples, policy)
    assert len(train) + len(test) == 200
    assert {s.user_id for s in train}.isdisjoint({s.user_id for s in test})
    assert 20 < len(test) < 80
    assert user_bucket("u1", 7) == user_bucket("u1", 7)
    assert split(samples, policy) == (train, test)


def test_time_cutoff_split():
    train, test = split(_samples(10), SplitPolicy("time_cutoff", cutoff=1005))
    assert [s.target_timestamp for s in test] == [1005, 1006, 1007, 1008, 1009]
    with pytest.raises(DataError):
        split(_samples(10), SplitPolicy("time_cutoff"))
    with pytest.raises(DataError):
        split(_samples(10), SplitPolicy("random"))


# =========================
# sample file
# =========================
def test_sample_file_round_trip(tmp_path):
    samples = negative_sample(_samples(), Vocabulary.from_samples(_samples()), seed=0)
    vocab = Vocabulary.from_samples(samples)
    path = write_samples(tmp_path / "s.jsonl", samples, vocab)
    header = json.loads(path.read_text(encoding="utf-8").splitlines()[0])
    assert header["format"] == "mimn-samples" and header["count"] == len(samples)

    back, back_vocab = read_samples(path)
    assert back == samples
    assert back_vocab == vocab


def test_sample_file_rejects_bad_input(tmp_path):
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"format": "other"}\n', encoding="utf-8")
    with pytest.raises(DataError):
        read_samples(bad)
    with pytest.raises(FileNotFoundError):
        read_samples(tmp_path / "none.jsonl")


# =========================
# synthetic generators
# =========================
def test_marker_task_labels():
    samples, vocab = synthetic.marker_task(200, seed=1)
    for s in samples:
        has_marker = any(c == synthetic.MARKER_CATEGORY for _, c in s.history)
        assert has_marker == bool(s.label)
        assert s.target[1] != synthetic.MARKER_CATEGORY
    positives = sum(s.label for s in samples)
    assert 60 < positives < 140
    assert vocab.n_items == 101


def test_zipf_streams_are_skewed():
    streams, _ = synthetic.user_streams(20, 200, n_categories=10, zipf_s=1.1, seed=0)
    counts = {}
    for evs in streams.values():
        for _, c, _ in evs:
            counts[c] = counts.get(c, 0) + 1
    assert counts["c0"] > 3 * counts.get("c9", 0)
    assert all(len(evs) == 200 for evs in streams.values())
