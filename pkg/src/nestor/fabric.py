"""Simulated batch allocator: N identical node-agent processes.

Mirrors the multi-copy launch paradigm of batch systems: every node runs
the same program and differs only in the parameters it is handed. Nodes
are OS processes on one machine; each gets a private sandbox directory,
a CPU-slot budget (logical tokens, not pinned cores), and a walltime
after which it is signalled and then force-killed.

Agent environment contract (set for every spawned process):

    NESTOR_CLUSTER_ID   cluster id shared by the whole allocation
    NESTOR_NODE_INDEX   0-based node index
    NESTOR_CPU_SLOTS    slot budget of this node
    NESTOR_SANDBOX_DIR  the node's private writable directory
    NESTOR_STORE_ROOT   root of the shared rendezvous store
    NESTOR_WALLTIME_S   seconds until the allocation expires

Bundle archive format: a tar whose top-level ``manifest.json`` maps entry
name to SHA-256 hex digest; the remaining members are the entries.
"""
from __future__ import annotations

import hashlib
import io
import json
import logging
import os
import shutil
import signal
import subprocess
import sys
import tarfile
import threading
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Mapping, Sequence

from .errors import DigestMismatch, SpawnFailed, StagingFailed

log = logging.getLogger(__name__)

ENV_CLUSTER_ID = "NESTOR_CLUSTER_ID"
ENV_NODE_INDEX = "NESTOR_NODE_INDEX"
ENV_CPU_SLOTS = "NESTOR_CPU_SLOTS"
ENV_SANDBOX_DIR = "NESTOR_SANDBOX_DIR"
ENV_STORE_ROOT = "NESTOR_STORE_ROOT"
ENV_WALLTIME_S = "NESTOR_WALLTIME_S"

MANIFEST_NAME = "manifest.json"
BUNDLE_SUBDIR = "bundle"
STAGED_MARKER = ".staged"

GRACE_PERIOD_S = 5.0


def _sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _check_entry_name(name: str) -> None:
    if not name or name == MANIFEST_NAME:
        raise ValueError(f"invalid bundle entry name: {name!r}")
    p = Path(name)
    if p.is_absolute() or ".." in p.parts:
        raise ValueError(f"bundle entry escapes the sandbox: {name!r}")


@dataclass(frozen=True)
class Bundle:
    """An immutable workload archive: manifest of digests plus tar payload."""

    manifest: Mapping[str, str]
    payload: bytes

    @classmethod
    def from_entries(cls, entries: Mapping[str, bytes]) -> "Bundle":
        manifest = {}
        for name in entries:
            _check_entry_name(name)
        buf = io.BytesIO()
        # mtime pinned to 0 so identical entries always yield identical bytes
        with tarfile.open(fileobj=buf, mode="w") as tar:
            for name in sorted(entries):
                manifest[name] = _sha256_hex(entries[name])
            mdata = json.dumps(manifest, sort_keys=True).encode("utf-8")
            cls._add_member(tar, MANIFEST_NAME, mdata)
            for name in sorted(entries):
                cls._add_member(tar, name, entries[name])
        return cls(manifest=manifest, payload=buf.getvalue())

    @staticmethod
    def _add_member(tar: tarfile.TarFile, name: str, data: bytes) -> None:
        info = tarfile.TarInfo(name=name)
        info.size = len(data)
        info.mtime = 0
        tar.addfile(info, io.BytesIO(data))

    def entries(self) -> dict[str, bytes]:
        """Extract entry bytes from the payload (manifest not re-verified here)."""
        out: dict[str, bytes] = {}
        with tarfile.open(fileobj=io.BytesIO(self.payload), mode="r") as tar:
            for member in tar.getmembers():
                if member.name == MANIFEST_NAME or not member.isfile():
                    continue
                _check_entry_name(member.name)
                fh = tar.extractfile(member)
                out[member.name] = fh.read() if fh else b""
        return out

    def with_entry(self, name: str, data: bytes) -> "Bundle":
        _check_entry_name(name)
        entries = self.entries()
        if name in entries or name in self.manifest:
            raise ValueError(f"bundle already contains entry {name!r}")
        entries[name] = data
        return Bundle.from_entries(entries)

    def digest(self) -> str:
        return _sha256_hex(self.payload)

    def write_to(self, path: os.PathLike | str) -> None:
        Path(path).write_bytes(self.payload)

    @classmethod
    def load(cls, path: os.PathLike | str) -> "Bundle":
        payload = Path(path).read_bytes()
        with tarfile.open(fileobj=io.BytesIO(payload), mode="r") as tar:
            try:
                fh = tar.extractfile(MANIFEST_NAME)
            except KeyError:
                raise StagingFailed(f"{path}: bundle has no {MANIFEST_NAME}") from None
            manifest = json.loads(fh.read().decode("utf-8"))
        if not isinstance(manifest, dict):
            raise StagingFailed(f"{path}: manifest is not an object")
        return cls(manifest=manifest, payload=payload)


@dataclass(frozen=True)
class NodeSpec:
    """Launch parameters of one node agent."""

    node_index: int
    cpu_slots: int
    sandbox_dir: Path


@dataclass
class AgentCommand:
    """Launch descriptor: the one program every node runs, plus extra env."""

    argv: Sequence[str]
    env: Mapping[str, str] = field(default_factory=dict)


def default_agent_command() -> AgentCommand:
    # BLAS pinned to one thread per process; the benchmark controls per-step
    # cost explicitly and must not be skewed by library-level threading.
    return AgentCommand(
        argv=(sys.executable, "-m", "nestor.agent"),
        env={
            "OMP_NUM_THREADS": "1",
            "OPENBLAS_NUM_THREADS": "1",
            "MKL_NUM_THREADS": "1",
        },
    )


class AllocationState(str, Enum):
    PENDING = "Pending"
    RUNNING = "Running"
    EXPIRED = "Expired"
    TORN_DOWN = "TornDown"


class Allocation:
    """A set of homogeneous node-agent processes with a walltime.

    State transitions only Pending -> Running -> (Expired | TornDown).
    allocate()/teardown() are single-caller operations; the walltime
    enforcer runs on its own timer thread.
    """

    def __init__(
        self,
        allocation_id: str,
        nodes: Sequence[NodeSpec],
        walltime_s: float,
        agent_command: AgentCommand,
        sandbox_root: Path,
    ):
        self.allocation_id = allocation_id
        self.cluster_id = allocation_id  # one cluster per allocation
        self.nodes = tuple(nodes)
        self.walltime_s = walltime_s
        self.agent_command = agent_command
        self.sandbox_root = sandbox_root
        self.state = AllocationState.PENDING
        self.bundle_path: Path | None = None
        self.started_at: float | None = None
        self.term_kills = 0
        self.hard_kills = 0
        self.unkillable: list[int] = []
        self._procs: list[subprocess.Popen] = []
        self._lock = threading.RLock()
        self._cancel = threading.Event()
        self._enforcer: threading.Thread | None = None
        self._done = threading.Event()

    # -- queries ---------------------------------------------------------

    def pids(self) -> list[int]:
        return [p.pid for p in self._procs]

    def live_pids(self) -> list[int]:
        return [p.pid for p in self._procs if p.poll() is None]

    def wait_all_exited(self, timeout: float) -> bool:
        deadline = time.monotonic() + timeout
        while time.monotonic() < deadline:
            if not self.live_pids():
                return True
            time.sleep(0.05)
        return not self.live_pids()

    def wait_done(self, timeout: float) -> bool:
        """True once the allocation is Expired or TornDown."""
        return self._done.wait(timeout)

    # -- lifecycle -------------------------------------------------------

    def stage_bundle(self, bundle: Bundle) -> None:
        stage_bundle(self, bundle)

    def enforce_walltime(self) -> None:
        """Start the walltime enforcer thread (idempotent)."""
        with self._lock:
            if self.state is not AllocationState.RUNNING:
                raise ValueError(f"allocation is {self.state.value}, not Running")
            if self._enforcer is not None:
                return
            self._enforcer = threading.Thread(
                target=self._enforce_loop,
                name=f"walltime-{self.allocation_id}",
                daemon=True,
            )
            self._enforcer.start()

    def _enforce_loop(self) -> None:
        deadline = (self.started_at or time.monotonic()) + self.walltime_s
        while not self._cancel.is_set():
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                break
            self._cancel.wait(min(remaining, 0.5))
        if self._cancel.is_set():
            return  # torn down first; enforcement no-ops
        with self._lock:
            if self.state is not AllocationState.RUNNING:
                return
            self.term_kills = self._signal_all(signal.SIGTERM)
        killed_deadline = time.monotonic() + GRACE_PERIOD_S
        while time.monotonic() < killed_deadline and self.live_pids():
            time.sleep(0.1)
        with self._lock:
            self.hard_kills = self._signal_all(signal.SIGKILL)
        time.sleep(0.2)
        self.unkillable = self.live_pids()
        if self.unkillable:
            log.warning("allocation %s: unkillable pids %s",
                        self.allocation_id, self.unkillable)
        with self._lock:
            if self.state is AllocationState.RUNNING:
                self.state = AllocationState.EXPIRED
        self._done.set()

    def _signal_all(self, sig: int) -> int:
        sent = 0
        for proc in self._procs:
            if proc.poll() is not None:
                continue
            try:
                # agents run in their own sessions; signal the whole group
                os.killpg(proc.pid, sig)
                sent += 1
            except (ProcessLookupError, PermissionError):
                try:
                    proc.send_signal(sig)
                    sent += 1
                except (ProcessLookupError, OSError):
                    pass
        return sent

    def teardown(self, retain_sandbox: bool = False) -> None:
        teardown(self, retain_sandbox=retain_sandbox)


def allocate(
    n_nodes: int,
    cpus_per_node: int,
    walltime_s: float,
    agent_command: AgentCommand,
    *,
    sandbox_root: os.PathLike | str,
    allocation_id: str | None = None,
    store_root: os.PathLike | str | None = None,
) -> Allocation:
    """Spawn n_nodes identical agent processes, one sandbox each.

    All agents run agent_command.argv verbatim; they differ only in the
    NESTOR_* environment. On any spawn failure every already-started agent
    is terminated and SpawnFailed is raised.
    """
    if n_nodes < 1:
        raise ValueError(f"n_nodes must be >= 1, got {n_nodes}")
    if cpus_per_node < 1:
        raise ValueError(f"cpus_per_node must be >= 1, got {cpus_per_node}")
    if walltime_s <= 0:
        raise ValueError(f"walltime_s must be positive, got {walltime_s}")

    allocation_id = allocation_id or f"alloc-{secrets_hex()}"
    sandbox_root = Path(sandbox_root)
    sandbox_root.mkdir(parents=True, exist_ok=True)

    nodes = []
    for i in range(n_nodes):
        sandbox = sandbox_root / f"node-{i}"
        sandbox.mkdir(parents=True, exist_ok=True)
        if any(sandbox.iterdir()):
            raise ValueError(f"sandbox {sandbox} is not empty at launch")
        nodes.append(NodeSpec(node_index=i, cpu_slots=cpus_per_node, sandbox_dir=sandbox))

    alloc = Allocation(allocation_id, nodes, walltime_s, agent_command, sandbox_root)

    for node in nodes:
        env = dict(os.environ)
        env.update(agent_command.env)
        env.update({
            ENV_CLUSTER_ID: alloc.cluster_id,
            ENV_NODE_INDEX: str(node.node_index),
            ENV_CPU_SLOTS: str(node.cpu_slots),
            ENV_SANDBOX_DIR: str(node.sandbox_dir),
            ENV_WALLTIME_S: str(walltime_s),
            "TMPDIR": str(node.sandbox_dir / "tmp"),
        })
        if store_root is not None:
            env[ENV_STORE_ROOT] = str(store_root)
        (node.sandbox_dir / "tmp").mkdir(exist_ok=True)
        log_path = node.sandbox_dir / "agent.log"
        try:
            with open(log_path, "wb") as log_fh:
                proc = subprocess.Popen(
                    list(agent_command.argv),
                    env=env,
                    cwd=node.sandbox_dir,
                    stdout=log_fh,
                    stderr=subprocess.STDOUT,
                    stdin=subprocess.DEVNULL,
                    start_new_session=True,
                )
        except OSError as exc:
            for started in alloc._procs:
                try:
                    os.killpg(started.pid, signal.SIGKILL)
                except (ProcessLookupError, PermissionError):
                    pass
                started.wait()
            raise SpawnFailed(node.node_index, str(exc)) from exc
        alloc._procs.append(proc)

    alloc.started_at = time.monotonic()
    alloc.state = AllocationState.RUNNING
    return alloc


def secrets_hex() -> str:
    return os.urandom(6).hex()


def stage_bundle(alloc: Allocation, bundle: Bundle) -> None:
    """Unpack a digest-verified copy of the bundle into every node sandbox.

    Idempotent: re-staging the identical bundle succeeds and leaves the
    same bytes in place.
    """
    if alloc.state not in (AllocationState.PENDING, AllocationState.RUNNING):
        raise StagingFailed(f"allocation is {alloc.state.value}")
    try:
        entries = bundle.entries()
    except (tarfile.TarError, ValueError) as exc:
        raise StagingFailed(f"unreadable bundle payload: {exc}") from exc
    unknown = set(entries) - set(bundle.manifest)
    if unknown:
        raise StagingFailed(f"entries missing from manifest: {sorted(unknown)}")

    for node in alloc.nodes:
        dest = node.sandbox_dir / BUNDLE_SUBDIR
        dest.mkdir(exist_ok=True)
        for name in bundle.manifest:
            if name not in entries:
                raise StagingFailed(f"manifest names missing entry {name!r}")
            data = entries[name]
            if _sha256_hex(data) != bundle.manifest[name]:
                raise DigestMismatch(node.node_index, name)
            target = dest / name
            target.parent.mkdir(parents=True, exist_ok=True)
            target.write_bytes(data)
        marker = json.dumps(
            {"bundle_digest": bundle.digest(), "entries": dict(bundle.manifest)},
            sort_keys=True,
        ).encode("utf-8")
        (dest / STAGED_MARKER).write_bytes(marker)
    alloc.bundle_path = None


def enforce_walltime(alloc: Allocation) -> None:
    alloc.enforce_walltime()


def teardown(alloc: Allocation, retain_sandbox: bool = False) -> None:
    """Terminate all agents and mark the allocation TornDown (idempotent)."""
    with alloc._lock:
        if alloc.state is AllocationState.TORN_DOWN:
            return
        alloc._cancel.set()
        alloc._signal_all(signal.SIGTERM)
    deadline = time.monotonic() + 2.0
    while time.monotonic() < deadline and alloc.live_pids():
        time.sleep(0.05)
    with alloc._lock:
        alloc._signal_all(signal.SIGKILL)
    for proc in alloc._procs:
        try:
            proc.wait(timeout=5)
        except subprocess.TimeoutExpired:
            log.warning("allocation %s: pid %d did not reap",
                        alloc.allocation_id, proc.pid)
    with alloc._lock:
        alloc.state = AllocationState.TORN_DOWN
    alloc._done.set()
    if not retain_sandbox:
        for node in alloc.nodes:
            shutil.rmtree(node.sandbox_dir, ignore_errors=True)
        try:
            alloc.sandbox_root.rmdir()
        except OSError:
            pass
