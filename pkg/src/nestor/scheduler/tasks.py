"""Task registry and worker-side execution.

Task kinds are plain functions registered by name; every node runs the
same program, so the registry is identical across the cluster. A task
body receives a TaskContext: params, live get() access to the object
store, and put() for its declared artifacts. Puts are buffered and only
flushed when the body returns cleanly, so a failed job never publishes
partial results.
"""
from __future__ import annotations

import base64
import time
from typing import Callable, Mapping, Protocol

from ..errors import TaskContractViolation, UnknownTaskKind

_REGISTRY: dict[str, Callable[["TaskContext"], None]] = {}


def register_task(name: str):
    """Decorator registering a task body under a kind name."""

    def deco(fn: Callable[["TaskContext"], None]):
        if name in _REGISTRY:
            raise ValueError(f"task kind {name!r} already registered")
        _REGISTRY[name] = fn
        return fn

    return deco


def registered_kinds() -> frozenset[str]:
    return frozenset(_REGISTRY)


class StoreHandle(Protocol):
    """Minimal artifact store surface a task execution needs."""

    def get(self, artifact_id: str) -> bytes: ...

    def put(self, artifact_id: str, data: bytes) -> None: ...


class TaskContext:
    def __init__(
        self,
        job_id: str,
        params: Mapping,
        declared_produces: frozenset[str],
        store: StoreHandle,
    ):
        self.job_id = job_id
        self.params = dict(params)
        self.declared_produces = declared_produces
        self._store = store
        self._pending: dict[str, bytes] = {}

    def get(self, artifact_id: str) -> bytes:
        return self._store.get(artifact_id)

    def put(self, artifact_id: str, data: bytes) -> None:
        if artifact_id not in self.declared_produces:
            raise TaskContractViolation(
                f"job {self.job_id!r} put undeclared artifact {artifact_id!r}"
            )
        if artifact_id in self._pending:
            raise TaskContractViolation(
                f"job {self.job_id!r} put artifact {artifact_id!r} twice"
            )
        self._pending[artifact_id] = bytes(data)


def run_task(
    task_kind: str,
    params: Mapping,
    store: StoreHandle,
    *,
    job_id: str = "local",
    declared_produces: frozenset[str] = frozenset(),
) -> dict[str, bytes]:
    """Execute a registered task body and store its declared artifacts.

    Raises whatever the body raises; raises TaskContractViolation when the
    produced set differs from the declaration. On success every declared
    artifact has been stored exactly once.
    """
    fn = _REGISTRY.get(task_kind)
    if fn is None:
        raise UnknownTaskKind(f"task kind {task_kind!r} is not registered")
    ctx = TaskContext(job_id, params, declared_produces, store)
    fn(ctx)
    missing = set(declared_produces) - set(ctx._pending)
    if missing:
        raise TaskContractViolation(
            f"job {job_id!r} finished without producing {sorted(missing)}"
        )
    for artifact_id, data in ctx._pending.items():
        store.put(artifact_id, data)
    return ctx._pending


# --- built-in task kinds ------------------------------------------------------


@register_task("echo")
def _echo(ctx: TaskContext) -> None:
    """Store params['text'] (or base64 params['data_b64']) under params['artifact']."""
    artifact_id = ctx.params["artifact"]
    if "data_b64" in ctx.params:
        data = base64.b64decode(ctx.params["data_b64"])
    else:
        data = str(ctx.params.get("text", "")).encode("utf-8")
    ctx.put(artifact_id, data)


@register_task("sleep")
def _sleep(ctx: TaskContext) -> None:
    time.sleep(float(ctx.params.get("seconds", 0.0)))
    for artifact_id in ctx.declared_produces:
        ctx.put(artifact_id, b"slept")


@register_task("fail")
def _fail(ctx: TaskContext) -> None:
    raise RuntimeError(str(ctx.params.get("message", "task failed on request")))


@register_task("concat")
def _concat(ctx: TaskContext) -> None:
    """Concatenate the artifacts named in params['inputs'] into params['output']."""
    sep = str(ctx.params.get("sep", "")).encode("utf-8")
    parts = [ctx.get(a) for a in ctx.params["inputs"]]
    ctx.put(ctx.params["output"], sep.join(parts))


@register_task("misbehave")
def _misbehave(ctx: TaskContext) -> None:
    """Deliberately put an artifact outside the declared set (negative tests)."""
    ctx.put(str(ctx.params["artifact"]), b"rogue")


@register_task("rollout")
def _rollout(ctx: TaskContext) -> None:
    # imported lazily: keeps non-benchmark agents free of numpy startup cost
    from .. import bench

    bench.rollout_task_body(ctx)
