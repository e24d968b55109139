"""Domain types of the head-worker scheduler."""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Mapping

# Reserved params key the head injects to carry the declared produce set to
# the worker; user params may not start with this prefix.
RESERVED_PARAM_PREFIX = "_nestor"
PRODUCES_PARAM = "_nestor_produces"

EXTERNAL_PRODUCER = "external"


class JobPhase(str, Enum):
    QUEUED = "Queued"
    READY = "Ready"
    RUNNING = "Running"
    SUCCEEDED = "Succeeded"
    FAILED = "Failed"


# Index in the legal transition chain; terminal phases share the last rank.
_PHASE_RANK = {
    JobPhase.QUEUED: 0,
    JobPhase.READY: 1,
    JobPhase.RUNNING: 2,
    JobPhase.SUCCEEDED: 3,
    JobPhase.FAILED: 3,
}


def phase_rank(phase: JobPhase) -> int:
    return _PHASE_RANK[phase]


def is_terminal(phase: JobPhase) -> bool:
    return phase in (JobPhase.SUCCEEDED, JobPhase.FAILED)


@dataclass(frozen=True)
class JobSpec:
    """A schedulable unit: resource requirement plus data dependencies."""

    job_id: str
    task_kind: str
    params: Mapping[str, Any] = field(default_factory=dict)
    cpu_req: int = 1
    data_deps: frozenset[str] = frozenset()
    produces: frozenset[str] = frozenset()

    def validate(self) -> None:
        if not self.job_id:
            raise ValueError("job_id must be non-empty")
        if not self.task_kind:
            raise ValueError("task_kind must be non-empty")
        if self.cpu_req < 1:
            raise ValueError(f"cpu_req must be >= 1, got {self.cpu_req}")
        overlap = set(self.produces) & set(self.data_deps)
        if overlap:
            raise ValueError(f"produces and data_deps overlap: {sorted(overlap)}")
        for key in self.params:
            if not isinstance(key, str):
                raise ValueError("params keys must be strings")
            if key.startswith(RESERVED_PARAM_PREFIX):
                raise ValueError(f"params key {key!r} uses a reserved prefix")

    def to_wire(self) -> dict:
        return {
            "job_id": self.job_id,
            "task_kind": self.task_kind,
            "params": dict(self.params),
            "cpu_req": self.cpu_req,
            "data_deps": sorted(self.data_deps),
            "produces": sorted(self.produces),
        }

    @classmethod
    def from_wire(cls, obj: Mapping[str, Any]) -> "JobSpec":
        spec = cls(
            job_id=str(obj["job_id"]),
            task_kind=str(obj["task_kind"]),
            params=dict(obj.get("params") or {}),
            cpu_req=int(obj.get("cpu_req", 1)),
            data_deps=frozenset(obj.get("data_deps") or ()),
            produces=frozenset(obj.get("produces") or ()),
        )
        spec.validate()
        return spec


@dataclass(frozen=True)
class Artifact:
    """An immutable blob in the global object store."""

    artifact_id: str
    payload: bytes
    producer: str = EXTERNAL_PRODUCER
    created_at: float = field(default_factory=time.time)

    @property
    def size(self) -> int:
        return len(self.payload)

    def validate(self) -> None:
        if not self.artifact_id:
            raise ValueError("artifact_id must be non-empty")


@dataclass
class WorkerState:
    """The head's view of one registered worker."""

    worker_id: int
    node_name: str
    cpu_slots_total: int
    cpu_slots_free: int
    running: set[str] = field(default_factory=set)
    last_seen: float = 0.0
    address: str = ""
    connected: bool = True

    def check(self) -> None:
        assert 0 <= self.cpu_slots_free <= self.cpu_slots_total, self


@dataclass(frozen=True)
class JobStatus:
    """Point-in-time snapshot of one job."""

    job_id: str
    phase: JobPhase
    worker_id: int | None = None
    error: str | None = None
    t_submitted: float | None = None
    t_dispatched: float | None = None
    t_finished: float | None = None

    def to_wire(self) -> dict:
        return {
            "job_id": self.job_id,
            "phase": self.phase.value,
            "worker_id": self.worker_id,
            "error": self.error,
            "t_submitted": self.t_submitted,
            "t_dispatched": self.t_dispatched,
            "t_finished": self.t_finished,
        }

    @classmethod
    def from_wire(cls, obj: Mapping[str, Any]) -> "JobStatus":
        return cls(
            job_id=obj["job_id"],
            phase=JobPhase(obj["phase"]),
            worker_id=obj.get("worker_id"),
            error=obj.get("error"),
            t_submitted=obj.get("t_submitted"),
            t_dispatched=obj.get("t_dispatched"),
            t_finished=obj.get("t_finished"),
        )


@dataclass(frozen=True)
class Event:
    """One entry of the head's append-only event log.

    seq is a dense per-cluster sequence number: seq ordering is the
    happened-before order of scheduler state changes.
    """

    seq: int
    t: float
    kind: str
    data: Mapping[str, Any]

    def to_wire(self) -> dict:
        return {"seq": self.seq, "t": self.t, "kind": self.kind, "data": dict(self.data)}
