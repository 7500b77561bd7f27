import json

import numpy as np
import pytest

from gcgkit.errors import ClientUnavailable, PreconditionViolated, SchemaError
from gcgkit.pipeline import (
    CheckpointStore,
    Clients,
    MockClient,
    PipelineConfig,
    read_manifest,
    run_all,
    run_level,
    validate_grand_record,
)
from gcgkit.pipeline.clients import clients_from_env, content_hash, request_key
from gcgkit.pipeline.levels import decode_depth, encode_depth
from gcgkit.pipeline.store import StageState
from gcgkit.pipeline.synthetic import HALLUCINATION, SyntheticWorld, synthetic_manifest


class Killer:
    """Wraps a client and simulates a crash after ``limit`` calls."""

    def __init__(self, inner, limit):
        self.inner, self.limit, self.n = inner, limit, 0

    def __call__(self, req):
        self.n += 1
        if self.n > self.limit:
            raise KeyboardInterrupt("simulated kill")
        return self.inner(req)


def run(tmp_path, name, n=10, workers=1, world=None, clients=None):
    world = world or SyntheticWorld(seed=1, hallucinate=0.5)
    out = tmp_path / name / "corpus.jsonl"
    out.parent.mkdir(parents=True, exist_ok=True)
    recs, report = run_all(synthetic_manifest(n, seed=1), clients or world.clients(),
                           CheckpointStore(tmp_path / name / "store"), PipelineConfig(workers=workers), out)
    return recs, report, out.read_bytes()


def test_ten_image_run(tmp_path):
    recs, report, _ = run(tmp_path, "a")
    assert len(recs) == 10 and report.n_complete == 10 and report.failures == []
    for r in recs:
        validate_grand_record(r)
        assert r["dense_caption"] and r["extra_context"]
        assert all(len(o["corroborators"]) >= 3 for o in r["objects"])
        assert r["verification_status"] in ("Verified", "Rejected")


def test_worker_invariance(tmp_path):
    blobs = {w: run(tmp_path, f"w{w}", workers=w)[2] for w in (1, 4, 16)}
    assert blobs[1] == blobs[4] == blobs[16]


def test_kill_and_resume(tmp_path):
    _, _, ref = run(tmp_path, "ref", workers=4)
    world = SyntheticWorld(seed=1, hallucinate=0.5)
    clients = world.clients()
    clients.text_llm = Killer(clients.text_llm, 7)
    store = tmp_path / "killed" / "store"
    with pytest.raises(KeyboardInterrupt):
        run_all(synthetic_manifest(10, seed=1), clients, CheckpointStore(store), PipelineConfig(workers=4))
    # some levels finished, none are inconsistent
    states = [CheckpointStore(store).state(im["image_id"]) for im in synthetic_manifest(10, seed=1)]
    assert any(s.completed_levels for s in states)
    for s in states:
        s.check()
    _, report, blob = run(tmp_path, "killed", workers=2)
    assert blob == ref
    assert report.levels["1"]["skipped"] == 10


def test_resume_skips_everything(tmp_path):
    _, _, first = run(tmp_path, "r")
    world = SyntheticWorld(seed=1, hallucinate=0.5)
    clients = world.clients()
    recs, report, again = run(tmp_path, "r", world=world, clients=clients)
    assert again == first
    assert all(report.levels[str(l)]["skipped"] == 10 for l in (1, 2, 3, 4))
    assert clients.text_llm.calls == 0


def test_failing_detector_isolated(tmp_path):
    ids = [im["image_id"] for im in synthetic_manifest(10, seed=1)]
    world = SyntheticWorld(seed=1, failing_detector={ids[3]: "det_b"})
    recs, report, _ = run(tmp_path, "f", world=world)
    assert len(recs) == 9
    assert len(report.failures) == 1 and report.failures[0]["image_id"] == ids[3]
    assert report.failures[0]["level"] == 1


def test_level1_idempotent(tmp_path):
    images = synthetic_manifest(3, seed=2)
    store = CheckpointStore(tmp_path / "s")
    clients = SyntheticWorld(seed=2).clients()
    first = run_level(1, images, clients, store)
    assert all(r["objects"] for r in first)
    calls = clients.detectors["det_a"].calls
    again = run_level(1, images, clients, store)
    assert json.dumps(first, sort_keys=True) == json.dumps(again, sort_keys=True)
    assert clients.detectors["det_a"].calls == calls


def test_precondition(tmp_path):
    with pytest.raises(PreconditionViolated):
        run_level(2, synthetic_manifest(1), SyntheticWorld().clients(), CheckpointStore(tmp_path / "s"))


def test_regeneration_trace(tmp_path):
    images = synthetic_manifest(1, seed=4)
    store = CheckpointStore(tmp_path / "s")
    clients = SyntheticWorld(seed=4, hallucinate=1.0).clients()
    for level in (1, 2):
        run_level(level, images, clients, store)
    rec = run_level(3, images, clients, store)[0]
    log = rec["verification"]
    assert [e["status"] for e in log] == ["Rejected", "Verified"]
    assert any("unicorn" in m for m in log[0]["missing"])
    assert HALLUCINATION in log[0]["caption"] and "unicorn" not in log[1]["caption"]
    assert rec["verification_status"] == "Verified"


def test_always_rejected_keeps_last(tmp_path):
    images = synthetic_manifest(1, seed=4)
    store = CheckpointStore(tmp_path / "s")
    world = SyntheticWorld(seed=4)
    clients = world.clients()
    for level in (1, 2):
        run_level(level, images, clients, store)

    def stubborn(req):
        if req["task"] == "dense_caption":
            return {"text": "[[0|A thing]] sits. A unicorn watches."}
        return world.text_llm(req)

    clients.text_llm = stubborn
    rec = run_level(3, images, clients, store, PipelineConfig(max_caption_retries=2))[0]
    assert [e["status"] for e in rec["verification"]] == ["Rejected"] * 3
    assert rec["verification_status"] == "Rejected"


def test_all_malformed_fails(tmp_path):
    images = synthetic_manifest(1, seed=4)
    store = CheckpointStore(tmp_path / "s")
    world = SyntheticWorld(seed=4)
    clients = world.clients()
    for level in (1, 2):
        run_level(level, images, clients, store)
    clients.text_llm = lambda req: {"text": "[[77|nothing]] here"}
    assert run_level(3, images, clients, store) == [None]
    assert store.state(images[0]["image_id"]).failed["level"] == 3


def test_missing_client_marks_failure(tmp_path):
    clients = SyntheticWorld().clients()
    clients.depth_estimator = None
    assert run_level(1, synthetic_manifest(2), clients, CheckpointStore(tmp_path / "s")) == [None, None]


def test_validate_rejects_bad_records(tmp_path):
    recs, _, _ = run(tmp_path, "v", n=2)
    rec = json.loads(json.dumps(recs[0]))
    rec["objects"][0]["corroborators"] = ["det_a"]
    with pytest.raises(SchemaError):
        validate_grand_record(rec)
    rec = json.loads(json.dumps(recs[0]))
    rec["verification"] = []
    with pytest.raises(SchemaError):
        validate_grand_record(rec)
    rec = json.loads(json.dumps(recs[0]))
    rec["relationships"].append({"subject_ids": [99], "object_ids": [], "predicate": "x"})
    with pytest.raises(SchemaError):
        validate_grand_record(rec)


def test_manifest(tmp_path):
    p = tmp_path / "m.jsonl"
    p.write_text('{"image_id": "a", "path": "a.ppm", "width": 4, "height": 3}\n\n')
    assert read_manifest(p) == [{"image_id": "a", "path": "a.ppm", "width": 4, "height": 3}]
    p.write_text('{"image_id": "a", "width": 4, "height": 3}\n{"image_id": "a", "width": 4, "height": 3}\n')
    with pytest.raises(SchemaError):
        read_manifest(p)
    p.write_text('{"image_id": "a"}\n')
    with pytest.raises(SchemaError):
        read_manifest(p)


def test_store_downward_closure(tmp_path):
    store = CheckpointStore(tmp_path / "s")
    store.commit("x", 1, {"a": 1}, "h1")
    store.commit("x", 2, {"a": 2}, "h2")
    store.commit("x", 1, {"a": 3}, "h1b")  # redoing level 1 invalidates level 2
    st = store.state("x")
    assert st.completed_levels == [1] and store.record_at("x", 2) is None
    assert CheckpointStore(tmp_path / "s").record_at("x", 1) == {"a": 3}
    with pytest.raises(ValueError):
        StageState("y", [2]).check()


def test_store_survives_torn_shard(tmp_path):
    store = CheckpointStore(tmp_path / "s")
    store.commit("x", 1, {"a": 1}, "h")
    with open(tmp_path / "s" / "shards" / "level1.jsonl", "a") as fh:
        fh.write('{"image_id": "x", "lev')
    assert CheckpointStore(tmp_path / "s").record_at("x", 1) == {"a": 1}


def test_mock_client_fixture_round_trip(tmp_path):
    world = SyntheticWorld(seed=5)
    clients = world.clients()
    run_level(1, synthetic_manifest(2, seed=5), clients, CheckpointStore(tmp_path / "a"))
    clients.dump_fixtures(tmp_path / "fx")
    replay = Clients.from_fixtures(tmp_path / "fx")
    a = run_level(1, synthetic_manifest(2, seed=5), replay, CheckpointStore(tmp_path / "b"))
    b = run_level(1, synthetic_manifest(2, seed=5), world.clients(), CheckpointStore(tmp_path / "c"))
    assert a == b
    with pytest.raises(ClientUnavailable):
        MockClient("detector")({"x": 1})


def test_request_key_is_content_based():
    assert request_key("r", {"a": 1, "b": 2}) == request_key("r", {"b": 2, "a": 1})
    assert request_key("r", {"a": 1}) != request_key("s", {"a": 1})
    assert content_hash([1, 2]) != content_hash([2, 1])


def test_depth_codec():
    vals = np.arange(12, dtype=np.float64).reshape(3, 4) / 7
    d = decode_depth(encode_depth(vals), 4, 3)
    np.testing.assert_allclose(d.values, vals.astype("<f4"))
    with pytest.raises((SchemaError, ValueError)):
        decode_depth(encode_depth(vals), 3, 4)


def test_clients_from_env():
    c = clients_from_env(env={"GCGKIT_DETECTOR_ENDPOINT": "a=http://h:1,b=http://h:2",
                              "GCGKIT_TEXT_LLM_ENDPOINT": "http://h:3"})
    assert sorted(c.detectors) == ["a", "b"] and c.text_llm is not None and c.segmenter is None
    with pytest.raises(ValueError):
        clients_from_env(env={"GCGKIT_DETECTOR_ENDPOINT": "nourl"})
