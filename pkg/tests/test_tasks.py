"""Task registry and run_task contract tests."""
from __future__ import annotations

import pytest

from nestor.errors import (
    ArtifactNotFound,
    TaskContractViolation,
    UnknownTaskKind,
)
from nestor.scheduler.tasks import run_task


class DictStore:
    def __init__(self, initial=None):
        self.data = dict(initial or {})

    def get(self, artifact_id):
        try:
            return self.data[artifact_id]
        except KeyError:
            raise ArtifactNotFound(artifact_id) from None

    def put(self, artifact_id, data):
        assert artifact_id not in self.data
        self.data[artifact_id] = bytes(data)


def test_echo_produces_declared_artifact():
    store = DictStore()
    produced = run_task("echo", {"artifact": "out", "text": "hi"},
                        store, declared_produces=frozenset({"out"}))
    assert produced == {"out": b"hi"}
    assert store.data["out"] == b"hi"


def test_concat_reads_dependencies():
    store = DictStore({"x": b"aa", "y": b"bb"})
    run_task("concat", {"inputs": ["x", "y"], "output": "z", "sep": "-"},
             store, declared_produces=frozenset({"z"}))
    assert store.data["z"] == b"aa-bb"


def test_unknown_kind_raises():
    with pytest.raises(UnknownTaskKind):
        run_task("definitely-not-registered", {}, DictStore())


def test_failing_task_propagates_and_stores_nothing():
    store = DictStore()
    with pytest.raises(RuntimeError, match="kaput"):
        run_task("fail", {"message": "kaput"}, store,
                 declared_produces=frozenset())
    assert store.data == {}


def test_undeclared_artifact_is_contract_violation():
    store = DictStore()
    with pytest.raises(TaskContractViolation):
        run_task("misbehave", {"artifact": "rogue"}, store,
                 declared_produces=frozenset({"expected"}))
    assert store.data == {}


def test_missing_declared_artifact_is_contract_violation():
    store = DictStore()
    with pytest.raises(TaskContractViolation, match="without producing"):
        run_task("echo", {"artifact": "a", "text": "x"}, store,
                 declared_produces=frozenset({"a", "b"}))
    assert store.data == {}


def test_double_put_is_contract_violation():
    store = DictStore()

    def body(ctx):
        ctx.put("a", b"1")
        ctx.put("a", b"2")

    from nestor.scheduler import tasks

    tasks._REGISTRY["_test_double_put"] = body
    try:
        with pytest.raises(TaskContractViolation, match="twice"):
            run_task("_test_double_put", {}, store,
                     declared_produces=frozenset({"a"}))
    finally:
        del tasks._REGISTRY["_test_double_put"]


def test_puts_flushed_only_on_success():
    store = DictStore()

    def body(ctx):
        ctx.put("a", b"1")
        raise ValueError("after put")

    from nestor.scheduler import tasks

    tasks._REGISTRY["_test_flush"] = body
    try:
        with pytest.raises(ValueError):
            run_task("_test_flush", {}, store, declared_produces=frozenset({"a"}))
        assert store.data == {}
    finally:
        del tasks._REGISTRY["_test_flush"]
