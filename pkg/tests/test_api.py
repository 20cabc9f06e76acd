# tests/test_api.py
from __future__ import annotations

import pytest
from fastapi.testclient import TestClient

from app.main import create_app
from app.schemas.events import Candidate, ScoreRequest
from app.services.rtp.serving import handle_request
from app.services.uic import StateStore


@pytest.fixture
def store(stream_release):
    return StateStore(stream_release)


@pytest.fixture
def client(store):
    return TestClient(create_app(store))


def _event(user="u0", item="i1", cat="c1", ts=1):
    return {"user_id": user, "item_id": item, "category_id": cat, "timestamp": ts}


def test_health(client):
    res = client.get("/health")
    assert res.status_code == 200
    assert res.json() == {"status": "ok", "store": True, "param_version": 0, "users": 0}


def test_without_store_is_unavailable():
    client = TestClient(create_app())
    assert client.get("/health").json()["store"] is False
    assert client.get("/uic/users/u0").status_code == 503


def test_post_single_event_and_batch(client, store):
    res = client.post("/uic/events", json=_event())
    assert res.status_code == 200
    assert res.json() == {"applied": 1, "rejected": 0, "errors": []}

    batch = {"events": [_event(ts=2, item="i2", cat="c2"), _event(user="u1", ts=3)]}
    assert client.post("/uic/events", json=batch).json()["applied"] == 2
    assert store.get_state("u0").t == 2
    assert store.user_ids() == ["u0", "u1"]


def test_invalid_events_are_rejected_by_schema(client):
    assert client.post("/uic/events", json={"events": []}).status_code == 422
    assert client.post("/uic/events", json=_event(user=" ")).status_code == 422
    assert client.post("/uic/events", json=_event(ts=-1)).status_code == 422


def test_user_summary(client):
    cold = client.get("/uic/users/nobody").json()
    assert cold["cold_start"] is True and cold["t"] == 0
    assert cold["slot_utilization"] == [0.25] * 4

    client.post("/uic/events", json={"events": [_event(ts=k, item=f"i{k}") for k in range(1, 6)]})
    warm = client.get("/uic/users/u0").json()
    assert warm["cold_start"] is False and warm["t"] == 5
    assert sum(warm["slot_utilization"]) == pytest.approx(1.0)
    assert warm["state_bytes"] == 8 * (4 * (6 + 5) + 4)


def test_score_matches_serving_path(client, store):
    client.post("/uic/events", json={"events": [_event(ts=k, item=f"i{k}") for k in range(1, 8)]})
    body = {"user_id": "u0", "candidates": [{"item_id": "i3", "category_id": "c3"}, {"item_id": "i9", "category_id": "c3"}]}
    res = client.post("/rtp/score", json=body)
    assert res.status_code == 200
    out = res.json()
    req = ScoreRequest(user_id="u0", candidates=[Candidate(**c) for c in body["candidates"]])
    assert out["scores"] == handle_request(req, store)
    assert out["param_version"] == 0 and out["state_version"] == 0
    assert all(0.0 < s < 1.0 for s in out["scores"])


def test_score_needs_candidates(client):
    assert client.post("/rtp/score", json={"user_id": "u0", "candidates": []}).status_code == 422


def test_snapshot_and_rollback(client, store):
    client.post("/uic/events", json=_event())
    snap = client.post("/uic/snapshots").json()
    assert snap["user_count"] == 1 and len(snap["checksum"]) == 16

    client.post("/uic/events", json=_event(user="u9", ts=5))
    res = client.post(f"/uic/rollback/{snap['snapshot_id']}")
    assert res.status_code == 200
    assert res.json() == {"snapshot_id": snap["snapshot_id"], "restored_users": 1}
    assert not store.has_state("u9")

    assert client.post("/uic/rollback/snap-missing").status_code == 404


def test_quarantined_user_reports_errors(client, store, stream_release):
    from app.schemas.config import HyperParams
    from app.services.mimn.params import init_mimn_params

    client.post("/uic/events", json=_event())
    small = HyperParams(m=3, d=6, h=5, k_top=2, mlp_widths=[12, 2])
    vocab = stream_release.vocab
    store.deploy_params(init_mimn_params(small, vocab.n_items, vocab.n_categories), version=1, hyper=small)

    res = client.post("/uic/events", json=_event(ts=9)).json()
    assert res["applied"] == 0 and res["rejected"] == 1
    assert "quarantined" in res["errors"][0]
    assert client.get("/uic/users/u0").json()["quarantined"] is True
