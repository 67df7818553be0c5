"""Stratified sampling, durable labels, judge profiles, and the HTTP API."""

import json
import os
import signal
import socket
import subprocess
import sys
import time

import pytest
from fastapi.testclient import TestClient
from hypothesis import given, settings, strategies as st

from conv2bench.goldstand import (
    AnnotationItem,
    BatchStore,
    GoldStandardError,
    ItemNotFound,
    ProfileError,
    judge_profile,
    stratified_sample,
)
from conv2bench.judging import VerdictTable, VerdictVector
from conv2bench.service import create_app


def make_pool(n_per_model: int, models: tuple[str, ...], feedback_every: int = 0):
    pool = []
    for model in models:
        for i in range(n_per_model):
            source = "feedback" if feedback_every and i % feedback_every == 0 else "instruction"
            pool.append(AnnotationItem(
                conv_id=f"c{i:03d}",
                item_id=i % 5,
                subject_model_id=model,
                response_text=f"response {i} from {model}",
                question=f"Question {i}?",
                source=source,
                feedback_id=2 if source == "feedback" else None,
            ))
    return pool


class TestStratifiedSample:
    def test_488_over_8_models_is_61_each(self):
        models = tuple(f"model-{i}" for i in range(8))
        pool = make_pool(100, models)
        batch = stratified_sample(pool, total_n=488, seed=1)
        counts = batch.per_model_counts()
        assert set(counts.values()) == {61}
        assert len(batch.items) == 488

    def test_remainder_spread_deterministically(self):
        pool = make_pool(10, ("a", "b", "c"))
        batch = stratified_sample(pool, total_n=10, seed=0)
        counts = batch.per_model_counts()
        assert counts == {"a": 4, "b": 3, "c": 3}

    def test_seeded_rerun_identical(self):
        pool = make_pool(50, ("a", "b", "c"))
        keys1 = [i.key for i in stratified_sample(pool, 30, seed=9).items]
        keys2 = [i.key for i in stratified_sample(pool, 30, seed=9).items]
        assert keys1 == keys2

    def test_short_stratum_redistributed_with_warning(self, caplog):
        pool = make_pool(20, ("a", "b")) + make_pool(2, ("tiny",))
        with caplog.at_level("WARNING"):
            batch = stratified_sample(pool, total_n=30, seed=4)
        counts = batch.per_model_counts()
        assert counts["tiny"] == 2
        assert counts["a"] + counts["b"] == 28
        assert len(batch.items) == 30
        assert any("shortfall" in r.message for r in caplog.records)

    def test_oversized_request_rejected(self):
        pool = make_pool(3, ("a",))
        with pytest.raises(GoldStandardError):
            stratified_sample(pool, total_n=10, seed=0)

    @settings(max_examples=100, deadline=None)
    @given(
        k=st.integers(1, 9),
        total_n=st.integers(1, 200),
        seed=st.integers(0, 1000),
    )
    def test_balance_within_one(self, k, total_n, seed):
        models = tuple(f"m{i}" for i in range(k))
        per_model = max(1, (total_n + k - 1) // k) + 5
        pool = make_pool(per_model, models)
        if total_n > len(pool):
            return
        counts = stratified_sample(pool, total_n, seed=seed).per_model_counts()
        values = [counts.get(m, 0) for m in models]
        assert max(values) - min(values) <= 1
        assert sum(values) == total_n


def make_store(tmp_path, n=12, models=("model-a", "model-b"), feedback_every=4):
    pool = make_pool(n // len(models), models, feedback_every=feedback_every)
    batch = stratified_sample(pool, total_n=n, seed=0, batch_id="batch-t")
    return BatchStore.create(tmp_path / "batch", batch)


class TestLabelStore:
    def test_first_label_advances_progress(self, tmp_path):
        store = make_store(tmp_path)
        item, position = store.next_unlabeled("alice")
        assert position == 1
        state = store.record_label(item.key, True, "alice")
        assert state.effective is True
        assert store.progress()["labeled"] == 1

    def test_same_annotator_overwrites(self, tmp_path):
        store = make_store(tmp_path)
        key = store.batch.items[0].key
        store.record_label(key, True, "alice")
        state = store.record_label(key, False, "alice")
        assert state.effective is False
        assert not state.conflict
        assert store.progress()["labeled"] == 1

    def test_conflicting_second_annotator_flags_item(self, tmp_path):
        store = make_store(tmp_path)
        key = store.batch.items[0].key
        store.record_label(key, True, "alice")
        state = store.record_label(key, False, "bob")
        assert state.conflict
        assert store.progress()["conflicts"] == 1
        assert key not in store.effective_labels()
        # adjudication: bob aligns with alice, conflict clears
        state = store.record_label(key, True, "bob")
        assert not state.conflict
        assert store.effective_labels()[key] is True

    def test_unknown_item_key(self, tmp_path):
        store = make_store(tmp_path)
        with pytest.raises(ItemNotFound):
            store.record_label("nope::0::missing", True, "alice")

    def test_labels_survive_reopen(self, tmp_path):
        store = make_store(tmp_path)
        keys = [i.key for i in store.batch.items[:5]]
        for i, key in enumerate(keys):
            store.record_label(key, i % 2 == 0, "alice")
        store.close()

        reopened = BatchStore.open(tmp_path / "batch")
        labels = reopened.effective_labels()
        assert [labels[k] for k in keys] == [True, False, True, False, True]
        reopened.close()

    def test_compaction_preserves_labels(self, tmp_path):
        store = make_store(tmp_path)
        keys = [i.key for i in store.batch.items]
        store.record_label(keys[0], True, "alice")
        store.compact()
        store.record_label(keys[1], False, "alice")
        store.close()
        reopened = BatchStore.open(tmp_path / "batch")
        labels = reopened.effective_labels()
        assert labels[keys[0]] is True and labels[keys[1]] is False
        reopened.close()

    def test_torn_log_line_skipped(self, tmp_path):
        store = make_store(tmp_path)
        key = store.batch.items[0].key
        store.record_label(key, True, "alice")
        store.close()
        log = tmp_path / "batch" / "labels.log"
        with log.open("a", encoding="utf-8") as fh:
            fh.write('{"item_key": "half a rec')  # simulated crash mid-write
        reopened = BatchStore.open(tmp_path / "batch")
        assert reopened.effective_labels()[key] is True
        reopened.close()


def make_judge_tables(store: BatchStore, flip_keys=(), judge="judge-m"):
    """Per-subject verdict tables aligned with the batch items; verdicts are
    True except for the flipped item keys."""
    flip = set(flip_keys)
    by_subject: dict[str, dict[str, dict[int, bool]]] = {}
    for item in store.batch.items:
        by_subject.setdefault(item.subject_model_id, {}).setdefault(
            item.conv_id, {}
        )[item.item_id] = item.key not in flip
    tables = []
    for subject, by_conv in sorted(by_subject.items()):
        table = VerdictTable(subject, judge, "full")
        for conv_id, verdicts_by_id in by_conv.items():
            ids = sorted(verdicts_by_id)
            table.rows[conv_id] = VerdictVector(
                conv_id, judge, "full", [verdicts_by_id[i] for i in ids]
            )
            table.item_meta[conv_id] = [
                {"item_id": i, "tag": "[I]", "source": "instruction"} for i in ids
            ]
        tables.append(table)
    return tables


class TestJudgeProfile:
    def test_perfect_agreement_mixed_classes(self, tmp_path):
        store = make_store(tmp_path)
        false_keys = set()
        for i, item in enumerate(store.batch.items):
            label = i % 2 == 0
            store.record_label(item.key, label, "alice")
            if not label:
                false_keys.add(item.key)
        tables = make_judge_tables(store, flip_keys=false_keys)  # judge == human
        report = judge_profile(store, tables)
        assert report.overall.kappa == 1.0
        assert report.overall.f1_macro == 1.0
        assert report.substantial_agreement
        store.close()

    def test_unlabeled_items_listed(self, tmp_path):
        store = make_store(tmp_path)
        store.record_label(store.batch.items[0].key, True, "alice")
        with pytest.raises(ProfileError, match="unlabeled"):
            judge_profile(store, make_judge_tables(store))
        store.close()

    def test_conflicted_items_excluded(self, tmp_path):
        store = make_store(tmp_path)
        for item in store.batch.items:
            store.record_label(item.key, True, "alice")
        key = store.batch.items[0].key
        store.record_label(key, False, "bob")
        report = judge_profile(store, make_judge_tables(store))
        assert report.n_conflicted == 1
        assert report.n_used == store.total - 1
        store.close()

    def test_source_split_and_absent_feedback(self, tmp_path):
        store = make_store(tmp_path, feedback_every=0)  # instruction-only batch
        for item in store.batch.items:
            store.record_label(item.key, True, "alice")
        report = judge_profile(store, make_judge_tables(store))
        assert report.feedback is None
        assert report.instruction is not None
        assert report.instruction.n == store.total
        store.close()

    def test_constructed_confusion_kappa(self, tmp_path):
        store = make_store(tmp_path)
        items = store.batch.items
        for i, item in enumerate(items):
            store.record_label(item.key, i % 2 == 0, "alice")
        flip = {items[0].key}  # judge says False where human said True
        tables = make_judge_tables(store, flip_keys=flip)
        report = judge_profile(store, tables)
        # hand-check from the stored confusion matrix
        (tn, fp), (fn, tp) = report.overall.confusion
        n = tn + fp + fn + tp
        p_o = (tn + tp) / n
        p_e = ((tn + fp) * (tn + fn) + (fn + tp) * (fp + tp)) / (n * n)
        expected = (p_o - p_e) / (1 - p_e)
        assert report.overall.kappa == pytest.approx(expected, abs=0.005)
        store.close()


class TestHttpApi:
    @pytest.fixture
    def api(self, tmp_path):
        store = make_store(tmp_path)
        tables = {"judge-m": make_judge_tables(store)}
        client = TestClient(create_app(store, tables))
        yield client, store
        store.close()

    def test_next_label_progress_cycle(self, api):
        client, store = api
        r = client.get("/api/batch/batch-t/next", params={"annotator": "alice"})
        assert r.status_code == 200
        body = r.json()
        assert body["done"] is False
        assert body["item"]["position"] == 1
        assert body["item"]["total"] == store.total

        r = client.post("/api/batch/batch-t/label", json={
            "item_key": body["item"]["item_key"], "label": True, "annotator_id": "alice",
        })
        assert r.status_code == 200 and r.json()["ok"]

        progress = client.get("/api/batch/batch-t/progress").json()
        assert progress["labeled"] == 1
        nxt = client.get("/api/batch/batch-t/next", params={"annotator": "alice"}).json()
        assert nxt["item"]["position"] == 2

    def test_batch_complete_state(self, api):
        client, store = api
        for item in store.batch.items:
            client.post("/api/batch/batch-t/label", json={
                "item_key": item.key, "label": True, "annotator_id": "alice",
            })
        done = client.get("/api/batch/batch-t/next", params={"annotator": "alice"}).json()
        assert done == {"done": True, "total": store.total}

    def test_double_submit_single_label(self, api):
        client, store = api
        key = store.batch.items[0].key
        for _ in range(2):
            r = client.post("/api/batch/batch-t/label", json={
                "item_key": key, "label": True, "annotator_id": "alice",
            })
            assert r.status_code == 200
        assert store.progress()["labeled"] == 1
        assert store.item_state(key).labels == {"alice": True}

    def test_unknown_batch_and_item_404(self, api):
        client, store = api
        assert client.get("/api/batch/wrong/progress").status_code == 404
        r = client.post("/api/batch/batch-t/label", json={
            "item_key": "missing::0::m", "label": False, "annotator_id": "a",
        })
        assert r.status_code == 404

    def test_profile_endpoint(self, api):
        client, store = api
        r = client.get("/api/batch/batch-t/profile")
        assert r.status_code == 409  # unlabeled items remain
        for item in store.batch.items:
            client.post("/api/batch/batch-t/label", json={
                "item_key": item.key, "label": True, "annotator_id": "alice",
            })
        r = client.get("/api/batch/batch-t/profile", params={"judge": "judge-m"})
        assert r.status_code == 200
        assert r.json()["overall"]["kappa"] == 1.0

    def test_jump_to_index(self, api):
        client, store = api
        r = client.get("/api/batch/batch-t/item/3")
        assert r.status_code == 200
        assert r.json()["item"]["position"] == 3
        assert client.get("/api/batch/batch-t/item/999").status_code == 404


def _free_port() -> int:
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def test_kill_and_restart_loses_no_committed_label(tmp_path):
    import requests

    store = make_store(tmp_path)
    keys = [i.key for i in store.batch.items[:4]]
    store.close()
    port = _free_port()
    base = f"http://127.0.0.1:{port}"
    cmd = [
        sys.executable, "-m", "conv2bench.cli", "annotate", "serve",
        "--batch-dir", str(tmp_path / "batch"), "--port", str(port),
    ]

    def wait_up(proc):
        for _ in range(100):
            try:
                if requests.get(f"{base}/api/health", timeout=1).ok:
                    return
            except requests.ConnectionError:
                time.sleep(0.1)
            assert proc.poll() is None, "service exited early"
        raise AssertionError("service did not come up")

    proc = subprocess.Popen(cmd, stdout=subprocess.DEVNULL, stderr=subprocess.DEVNULL)
    try:
        wait_up(proc)
        for key in keys:
            r = requests.post(f"{base}/api/batch/batch-t/label", json={
                "item_key": key, "label": True, "annotator_id": "alice",
            }, timeout=5)
            assert r.ok
    finally:
        proc.send_signal(signal.SIGKILL)
        proc.wait(timeout=10)

    proc = subprocess.Popen(cmd, stdout=subprocess.DEVNULL, stderr=subprocess.DEVNULL)
    try:
        wait_up(proc)
        progress = requests.get(f"{base}/api/batch/batch-t/progress", timeout=5).json()
        assert progress["labeled"] == len(keys)
    finally:
        proc.send_signal(signal.SIGKILL)
        proc.wait(timeout=10)
