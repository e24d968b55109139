"""The head's scheduler state machine, independent of any transport.

SchedulerCore owns jobs, workers, the object store, and the event log.
It is deliberately single-threaded: the networked head drives it from one
event loop, tests drive it directly. All scheduling policy lives in the
two pure functions deps_satisfied() and schedule_tick().
"""
from __future__ import annotations

import time
from dataclasses import dataclass, replace
from typing import AbstractSet, Callable, Iterable, Sequence

from ..errors import (
    ArtifactNotFound,
    DuplicateArtifact,
    DuplicateJob,
    OversizedRequest,
    UnknownJob,
    UnknownTaskKind,
)
from . import tasks
from .types import (
    Artifact,
    Event,
    EXTERNAL_PRODUCER,
    JobPhase,
    JobSpec,
    JobStatus,
    WorkerState,
    is_terminal,
)


class ObjectStore:
    """Write-once artifact store keyed by artifact id."""

    def __init__(self):
        self._artifacts: dict[str, Artifact] = {}

    def put(self, artifact: Artifact) -> None:
        artifact.validate()
        if artifact.artifact_id in self._artifacts:
            raise DuplicateArtifact(f"artifact {artifact.artifact_id!r} already stored")
        self._artifacts[artifact.artifact_id] = artifact

    def get(self, artifact_id: str) -> Artifact:
        try:
            return self._artifacts[artifact_id]
        except KeyError:
            raise ArtifactNotFound(f"no artifact {artifact_id!r}") from None

    def __contains__(self, artifact_id: str) -> bool:
        return artifact_id in self._artifacts

    def ids(self) -> frozenset[str]:
        return frozenset(self._artifacts)

    def __len__(self) -> int:
        return len(self._artifacts)


def deps_satisfied(
    job: JobSpec,
    store_view: AbstractSet[str],
    workers: Sequence[WorkerState],
) -> bool:
    """True iff the job could start right now: data deps present in the
    store AND some worker has enough free slots. Pure, no side effects."""
    if not set(job.data_deps) <= set(store_view):
        return False
    return any(w.cpu_slots_free >= job.cpu_req for w in workers)


def schedule_tick(
    ready_jobs: Sequence[JobSpec],
    workers: Sequence[WorkerState],
) -> list[tuple[str, int]]:
    """Assign ready jobs to workers; FIFO over jobs in the given order.

    Each job goes to the worker with the most free slots among those that
    fit, ties broken by lowest worker_id. Free-slot counts are tracked
    through the tick so no worker is oversubscribed. Pure function.
    """
    free = {w.worker_id: w.cpu_slots_free for w in workers}
    assignments: list[tuple[str, int]] = []
    for job in ready_jobs:
        fitting = [wid for wid, slots in free.items() if slots >= job.cpu_req]
        if not fitting:
            continue
        wid = max(fitting, key=lambda w: (free[w], -w))
        free[wid] -= job.cpu_req
        assignments.append((job.job_id, wid))
    return assignments


@dataclass
class _JobRecord:
    spec: JobSpec
    status: JobStatus


@dataclass(frozen=True)
class Assignment:
    job_id: str
    worker_id: int
    spec: JobSpec


class SchedulerCore:
    """Jobs, workers, store, and event log behind one single-threaded API."""

    def __init__(
        self,
        known_kinds: Callable[[], AbstractSet[str]] | None = None,
        clock: Callable[[], float] = time.monotonic,
    ):
        self._known_kinds = known_kinds or tasks.registered_kinds
        self._clock = clock
        self.store = ObjectStore()
        self.events: list[Event] = []
        self._jobs: dict[str, _JobRecord] = {}
        self._order: list[str] = []
        self._workers: dict[int, WorkerState] = {}
        self._claimed: dict[str, str] = {}  # artifact id -> producing job id
        self._next_worker_id = 1
        self._seq = 0

    # -- event log ---------------------------------------------------------

    def _log(self, kind: str, **data) -> None:
        self._seq += 1
        self.events.append(Event(seq=self._seq, t=self._clock(), kind=kind, data=data))

    # -- workers -----------------------------------------------------------

    def add_worker(self, node_name: str, cpu_slots: int, address: str = "") -> int:
        if cpu_slots < 1:
            raise ValueError("cpu_slots must be >= 1")
        worker_id = self._next_worker_id
        self._next_worker_id += 1
        self._workers[worker_id] = WorkerState(
            worker_id=worker_id,
            node_name=node_name,
            cpu_slots_total=cpu_slots,
            cpu_slots_free=cpu_slots,
            last_seen=self._clock(),
            address=address,
        )
        self._log("worker-joined", worker_id=worker_id, node_name=node_name,
                  cpu_slots=cpu_slots)
        return worker_id

    def mark_worker_lost(self, worker_id: int) -> None:
        worker = self._workers.get(worker_id)
        if worker is None or not worker.connected:
            return
        worker.connected = False
        self._log("worker-left", worker_id=worker_id)
        for job_id in sorted(worker.running):
            self.on_result(job_id, ok=False, error=f"worker {worker_id} lost")

    def heartbeat(self, worker_id: int) -> None:
        worker = self._workers.get(worker_id)
        if worker is not None:
            worker.last_seen = self._clock()

    def connected_workers(self) -> list[WorkerState]:
        return [w for w in self._workers.values() if w.connected]

    def workers_snapshot(self) -> list[WorkerState]:
        return [replace_worker(w) for w in self._workers.values()]

    def worker_slot_total(self) -> int:
        return sum(w.cpu_slots_total for w in self.connected_workers())

    # -- submission ----------------------------------------------------------

    def submit(self, spec: JobSpec) -> str:
        spec.validate()
        if spec.job_id in self._jobs:
            raise DuplicateJob(f"job {spec.job_id!r} already submitted")
        if spec.task_kind not in self._known_kinds():
            raise UnknownTaskKind(f"task kind {spec.task_kind!r} is not registered")
        connected = self.connected_workers()
        if connected and spec.cpu_req > max(w.cpu_slots_total for w in connected):
            raise OversizedRequest(
                f"cpu_req {spec.cpu_req} exceeds every worker's slot total"
            )
        for artifact_id in spec.produces:
            if artifact_id in self._claimed:
                raise DuplicateArtifact(
                    f"artifact {artifact_id!r} already claimed by job "
                    f"{self._claimed[artifact_id]!r}"
                )
            if artifact_id in self.store:
                raise DuplicateArtifact(f"artifact {artifact_id!r} already stored")
        for artifact_id in spec.produces:
            self._claimed[artifact_id] = spec.job_id
        status = JobStatus(job_id=spec.job_id, phase=JobPhase.QUEUED,
                           t_submitted=self._clock())
        self._jobs[spec.job_id] = _JobRecord(spec=spec, status=status)
        self._order.append(spec.job_id)
        self._log("submitted", job_id=spec.job_id)
        self._promote()
        return spec.job_id

    def claimed_producer(self, artifact_id: str) -> str:
        return self._claimed.get(artifact_id, EXTERNAL_PRODUCER)

    # -- store -----------------------------------------------------------------

    def put_artifact(self, artifact: Artifact) -> None:
        self.store.put(artifact)
        self._log("put", artifact_id=artifact.artifact_id, size=artifact.size,
                  producer=artifact.producer)
        self._promote()

    def get_artifact(self, artifact_id: str) -> Artifact:
        return self.store.get(artifact_id)

    # -- phases ------------------------------------------------------------------

    def _promote(self) -> None:
        """Queued -> Ready for every job whose data deps are all stored."""
        view = self.store.ids()
        for job_id in self._order:
            record = self._jobs[job_id]
            if record.status.phase is not JobPhase.QUEUED:
                continue
            if set(record.spec.data_deps) <= view:
                record.status = replace(record.status, phase=JobPhase.READY)
                self._log("ready", job_id=job_id)

    def tick(self) -> list[Assignment]:
        """One scheduling pass. Returns the new assignments to dispatch."""
        self._promote()
        ready = [self._jobs[j].spec for j in self._order
                 if self._jobs[j].status.phase is JobPhase.READY]
        pairs = schedule_tick(ready, self.connected_workers())
        out = []
        now = self._clock()
        for job_id, worker_id in pairs:
            record = self._jobs[job_id]
            worker = self._workers[worker_id]
            worker.cpu_slots_free -= record.spec.cpu_req
            worker.running.add(job_id)
            worker.check()
            record.status = replace(record.status, phase=JobPhase.RUNNING,
                                    worker_id=worker_id, t_dispatched=now)
            self._log("dispatched", job_id=job_id, worker_id=worker_id)
            out.append(Assignment(job_id=job_id, worker_id=worker_id, spec=record.spec))
        return out

    def on_result(self, job_id: str, ok: bool, error: str | None = None) -> None:
        record = self._jobs.get(job_id)
        if record is None:
            raise UnknownJob(f"no job {job_id!r}")
        if is_terminal(record.status.phase):
            return  # late duplicate result (e.g. after worker-lost failure)
        if record.status.phase is not JobPhase.RUNNING:
            raise ValueError(f"result for job {job_id!r} in phase "
                             f"{record.status.phase.value}")
        worker = self._workers.get(record.status.worker_id)
        if worker is not None and job_id in worker.running:
            worker.running.discard(job_id)
            worker.cpu_slots_free += record.spec.cpu_req
            worker.check()
        phase = JobPhase.SUCCEEDED if ok else JobPhase.FAILED
        record.status = replace(record.status, phase=phase, error=error,
                                t_finished=self._clock())
        self._log("result", job_id=job_id, status="ok" if ok else "error",
                  error=error)

    # -- queries -------------------------------------------------------------------

    def job_status(self, job_id: str) -> JobStatus:
        record = self._jobs.get(job_id)
        if record is None:
            raise UnknownJob(f"no job {job_id!r}")
        return record.status

    def job_spec(self, job_id: str) -> JobSpec:
        record = self._jobs.get(job_id)
        if record is None:
            raise UnknownJob(f"no job {job_id!r}")
        return record.spec

    def jobs_snapshot(self) -> dict[str, JobStatus]:
        return {job_id: rec.status for job_id, rec in self._jobs.items()}

    def all_terminal(self, job_ids: Iterable[str]) -> bool:
        return all(is_terminal(self.job_status(j).phase) for j in job_ids)


def replace_worker(w: WorkerState) -> WorkerState:
    return WorkerState(
        worker_id=w.worker_id,
        node_name=w.node_name,
        cpu_slots_total=w.cpu_slots_total,
        cpu_slots_free=w.cpu_slots_free,
        running=set(w.running),
        last_seen=w.last_seen,
        address=w.address,
        connected=w.connected,
    )
