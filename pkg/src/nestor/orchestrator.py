"""Cluster lifecycle: stage the bundle, start the head, add workers, run.

up() drives the four phases end to end from one control thread. The node
agents proceed autonomously once spawned; the orchestrator only watches
the shared store and the head's entry point to decide when the cluster
is Ready. down() shuts the cluster down and reclaims every process.
"""
from __future__ import annotations

import json
import logging
import os
import threading
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Mapping, Sequence

from . import fabric
from .errors import (
    ClusterExists,
    ClusterNotReady,
    FormationTimeout,
    NestorError,
    StoreUnreachable,
    WorkloadFailed,
)
from .rendezvous import (
    DEFAULT_POLL_INTERVAL_S,
    FileStore,
    HeadRecord,
    WorkerRegistration,
)
from .scheduler.client import ClusterClient
from .scheduler.types import JobPhase, JobSpec, JobStatus

log = logging.getLogger(__name__)

HANDLE_FILE_NAME = "handle.json"
DEFAULT_FORMATION_TIMEOUT_S = 60.0


class ClusterPhase(str, Enum):
    STAGING = "Staging"
    HEAD_UP = "HeadUp"
    FORMING = "Forming"
    READY = "Ready"
    SHUTTING_DOWN = "ShuttingDown"
    DOWN = "Down"


@dataclass
class ClusterConfig:
    cluster_id: str
    n_nodes: int
    cpus_per_node: int
    walltime_s: float
    store_root: Path
    bundle: fabric.Bundle | None = None
    retain_sandbox: bool = False
    formation_timeout_s: float | None = None
    poll_interval_s: float = DEFAULT_POLL_INTERVAL_S
    bind_host: str = "127.0.0.1"

    def validate(self) -> None:
        if not self.cluster_id:
            raise ValueError("cluster_id must be non-empty")
        if self.n_nodes < 1:
            raise ValueError("n_nodes must be >= 1")
        if self.cpus_per_node < 1:
            raise ValueError("cpus_per_node must be >= 1")
        if self.walltime_s <= 0:
            raise ValueError("walltime_s must be positive")

    @property
    def expected_worker_slots(self) -> int:
        """The head consumes one whole node; a single node serves both roles."""
        if self.n_nodes == 1:
            return self.cpus_per_node
        return (self.n_nodes - 1) * self.cpus_per_node

    @property
    def n_workers(self) -> int:
        return 1 if self.n_nodes == 1 else self.n_nodes - 1

    def effective_formation_timeout(self) -> float:
        if self.formation_timeout_s is not None:
            return self.formation_timeout_s
        scale = max(1.0, self.n_nodes / 10.0)
        return DEFAULT_FORMATION_TIMEOUT_S * scale

    def agent_config(self) -> dict:
        """The cluster.json entry staged to every node inside the bundle."""
        return {
            "cluster_id": self.cluster_id,
            "n_nodes": self.n_nodes,
            "cpus_per_node": self.cpus_per_node,
            "walltime_s": self.walltime_s,
            "expected_worker_slots": self.expected_worker_slots,
            "formation_timeout_s": self.effective_formation_timeout(),
            "poll_interval_s": self.poll_interval_s,
            "bind_host": self.bind_host,
        }

    @classmethod
    def from_dict(cls, obj: Mapping, base_dir: Path | None = None) -> "ClusterConfig":
        base = base_dir or Path.cwd()
        bundle = None
        bundle_path = obj.get("bundle_path")
        if bundle_path:
            p = Path(bundle_path)
            bundle = fabric.Bundle.load(p if p.is_absolute() else base / p)
        store_root = Path(obj["store_root"])
        if not store_root.is_absolute():
            store_root = base / store_root
        cfg = cls(
            cluster_id=str(obj["cluster_id"]),
            n_nodes=int(obj["n_nodes"]),
            cpus_per_node=int(obj["cpus_per_node"]),
            walltime_s=float(obj["walltime_s"]),
            store_root=store_root,
            bundle=bundle,
            retain_sandbox=bool(obj.get("retain_sandbox", False)),
            formation_timeout_s=(
                float(obj["formation_timeout_s"])
                if obj.get("formation_timeout_s") is not None
                else None
            ),
        )
        cfg.validate()
        return cfg

    @classmethod
    def from_file(cls, path: os.PathLike | str) -> "ClusterConfig":
        path = Path(path)
        return cls.from_dict(json.loads(path.read_text("utf-8")), base_dir=path.parent)


class ClusterHandle:
    """Live view of one cluster; phase is readable from any thread."""

    def __init__(self, config: ClusterConfig, allocation: fabric.Allocation):
        self.config = config
        self.cluster_id = config.cluster_id
        self.allocation = allocation
        self.head_record: HeadRecord | None = None
        self.registered_workers: list[WorkerRegistration] = []
        self._phase = ClusterPhase.STAGING
        self._lock = threading.Lock()

    @property
    def phase(self) -> ClusterPhase:
        with self._lock:
            return self._phase

    def _set_phase(self, phase: ClusterPhase) -> None:
        with self._lock:
            self._phase = phase
        log.info("cluster %s phase -> %s", self.cluster_id, phase.value)

    def client(self, timeout: float = 10.0) -> ClusterClient:
        if self.head_record is None:
            raise ClusterNotReady("no head record yet")
        return ClusterClient.connect(self.head_record, timeout=timeout)

    def summary(self) -> dict:
        return {
            "cluster_id": self.cluster_id,
            "phase": self.phase.value,
            "head": None if self.head_record is None else {
                "address": self.head_record.address,
                "port": self.head_record.port,
                "epoch": self.head_record.epoch,
            },
            "n_nodes": self.config.n_nodes,
            "workers": len(self.registered_workers),
            "worker_slots": self.config.expected_worker_slots,
            "pids": self.allocation.pids(),
        }


def _check_not_exists(store_root: Path, cluster_id: str) -> None:
    cluster_dir = store_root / cluster_id
    for name in ("head.json", HANDLE_FILE_NAME):
        if (cluster_dir / name).exists():
            raise ClusterExists(f"cluster {cluster_id!r} already exists in the store")
    # a lock without a record is debris from a crashed formation; clear it so
    # the new election can proceed
    lock = cluster_dir / "head.lock"
    if lock.exists():
        log.warning("clearing stale head.lock for %s", cluster_id)
        try:
            lock.unlink()
        except OSError:
            pass


def up(config: ClusterConfig, cancel: threading.Event | None = None) -> ClusterHandle:
    """Bring a cluster to Ready, or tear everything down and raise.

    A set `cancel` event aborts formation at the next poll step; the
    allocation is torn down and FormationTimeout raised, exactly as if
    the formation deadline had passed.
    """
    config.validate()
    cancel = cancel or threading.Event()
    _check_not_exists(config.store_root, config.cluster_id)

    bundle = config.bundle or fabric.Bundle.from_entries({})
    bundle = bundle.with_entry(
        "cluster.json", json.dumps(config.agent_config(), indent=2).encode("utf-8")
    )

    sandbox_root = (config.store_root / config.cluster_id / "sandboxes"
                    / os.urandom(4).hex())
    try:
        allocation = fabric.allocate(
            config.n_nodes,
            config.cpus_per_node,
            config.walltime_s,
            fabric.default_agent_command(),
            sandbox_root=sandbox_root,
            allocation_id=config.cluster_id,
            store_root=config.store_root,
        )
    except OSError as exc:
        raise StoreUnreachable(
            f"phase Staging: cannot create sandboxes under {sandbox_root}: {exc}"
        ) from exc

    handle = ClusterHandle(config, allocation)
    store = FileStore(config.store_root)
    timeout = config.effective_formation_timeout()
    deadline = time.monotonic() + timeout
    try:
        fabric.stage_bundle(allocation, bundle)
        allocation.enforce_walltime()

        record = None
        while record is None:
            try:
                record = store.read_head(config.cluster_id)
            except NestorError as exc:
                raise FormationTimeout(f"phase HeadUp: {exc}") from exc
            if record is not None:
                break
            if cancel.is_set():
                raise FormationTimeout("phase HeadUp: formation cancelled")
            if time.monotonic() >= deadline:
                raise FormationTimeout(
                    f"phase HeadUp: no head record within {timeout:.1f}s"
                )
            time.sleep(0.02)
        handle.head_record = record
        handle._set_phase(ClusterPhase.HEAD_UP)

        handle._set_phase(ClusterPhase.FORMING)
        expected = config.expected_worker_slots
        client = None
        try:
            while True:
                if client is None:
                    try:
                        client = handle.client(timeout=5.0)
                    except NestorError:
                        client = None
                info = None
                if client is not None:
                    try:
                        info = client.cluster_info()
                    except NestorError:
                        client.close()
                        client = None
                if info is not None and info["worker_slot_total"] == expected:
                    handle.registered_workers = [
                        WorkerRegistration(
                            worker_id=w["worker_id"],
                            node_name=w["node_name"],
                            cpu_slots=w["cpu_slots_total"],
                            address=w.get("address", ""),
                        )
                        for w in info["workers"]
                    ]
                    break
                if cancel.is_set():
                    raise FormationTimeout("phase Forming: formation cancelled")
                if time.monotonic() >= deadline:
                    raise FormationTimeout(
                        f"phase Forming: {0 if info is None else info['worker_slot_total']}"
                        f"/{expected} worker slots registered within {timeout:.1f}s"
                    )
                time.sleep(0.05)
        finally:
            if client is not None:
                client.close()

        handle._set_phase(ClusterPhase.READY)
        return handle
    except BaseException:
        _teardown_cluster(handle, store)
        raise


@dataclass(frozen=True)
class Workload:
    """A job graph plus externally provided artifacts and result fetches."""

    jobs: Sequence[JobSpec]
    externals: Mapping[str, bytes] = field(default_factory=dict)
    fetch: Sequence[str] = ()


@dataclass
class WorkloadResult:
    statuses: dict[str, JobStatus]
    artifacts: dict[str, bytes]
    events: list[dict]


def run_script(
    handle: ClusterHandle,
    workload: Workload,
    timeout: float = 600.0,
) -> WorkloadResult:
    """Submit the workload's job graph through the head and block until done."""
    if handle.phase is not ClusterPhase.READY:
        raise ClusterNotReady(f"cluster is {handle.phase.value}")
    with handle.client() as client:
        for artifact_id in sorted(workload.externals):
            client.put_artifact(artifact_id, workload.externals[artifact_id])
        job_ids = []
        for spec in workload.jobs:
            job_ids.append(client.submit(spec))
        statuses = client.wait(job_ids, timeout=timeout)
        for job_id in job_ids:
            status = statuses[job_id]
            if status.phase is JobPhase.FAILED:
                raise WorkloadFailed(job_id, status.error or "failed")
        artifacts = {a: client.get_artifact(a) for a in workload.fetch}
        events = client.events()
    return WorkloadResult(statuses=statuses, artifacts=artifacts, events=events)


def _teardown_cluster(handle: ClusterHandle, store: FileStore) -> None:
    handle._set_phase(ClusterPhase.SHUTTING_DOWN)
    if handle.head_record is not None:
        try:
            with handle.client(timeout=2.0) as client:
                client.shutdown_cluster()
        except NestorError:
            pass
    handle.allocation.teardown(retain_sandbox=handle.config.retain_sandbox)
    try:
        store.clear_cluster(handle.cluster_id)
    except NestorError:
        pass
    remove_handle_file(handle.config.store_root, handle.cluster_id)
    handle._set_phase(ClusterPhase.DOWN)


def down(handle: ClusterHandle) -> None:
    """Shut the cluster down; idempotent from any phase."""
    if handle.phase is ClusterPhase.DOWN:
        return
    _teardown_cluster(handle, FileStore(handle.config.store_root))


# --- handle files (CLI reconnection) -----------------------------------------


def handle_file_path(store_root: os.PathLike | str, cluster_id: str) -> Path:
    return Path(store_root) / cluster_id / HANDLE_FILE_NAME


def write_handle_file(handle: ClusterHandle) -> Path:
    path = handle_file_path(handle.config.store_root, handle.cluster_id)
    path.parent.mkdir(parents=True, exist_ok=True)
    record = handle.head_record
    payload = {
        "cluster_id": handle.cluster_id,
        "phase": handle.phase.value,
        "store_root": str(handle.config.store_root),
        "n_nodes": handle.config.n_nodes,
        "cpus_per_node": handle.config.cpus_per_node,
        "walltime_s": handle.config.walltime_s,
        "retain_sandbox": handle.config.retain_sandbox,
        "head": None if record is None else {
            "address": record.address,
            "port": record.port,
            "epoch": record.epoch,
        },
        "pids": handle.allocation.pids(),
        "sandbox_root": str(handle.allocation.sandbox_root),
        "created_at": int(time.time()),
    }
    tmp = path.with_suffix(".tmp")
    tmp.write_text(json.dumps(payload, indent=2), "utf-8")
    os.replace(tmp, path)
    return path


def read_handle_file(store_root: os.PathLike | str, cluster_id: str) -> dict | None:
    path = handle_file_path(store_root, cluster_id)
    try:
        return json.loads(path.read_text("utf-8"))
    except FileNotFoundError:
        return None


def remove_handle_file(store_root: os.PathLike | str, cluster_id: str) -> None:
    try:
        handle_file_path(store_root, cluster_id).unlink()
    except OSError:
        pass
