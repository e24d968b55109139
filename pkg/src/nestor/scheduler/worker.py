"""Worker-side executor: joins the head and runs task bodies.

One worker holds one duplex channel to the head and executes up to
cpu_slots task bodies concurrently on a thread pool. Artifact GETs are
answered over the same channel; pending getters wait on per-artifact
events. PUTs for a finished task are flushed before its RESULT, so the
per-connection message order guarantees the head stores the artifacts
first.
"""
from __future__ import annotations

import base64
import logging
import threading
import time
import traceback
from concurrent.futures import ThreadPoolExecutor

from ..errors import ArtifactNotFound, ConnectionFailed, NestorError
from ..rendezvous import HeadRecord, WorkerRegistration, open_worker_channel
from .tasks import run_task
from .types import PRODUCES_PARAM

log = logging.getLogger(__name__)

HEARTBEAT_INTERVAL_S = 2.0
GET_TIMEOUT_S = 60.0


class _RemoteStore:
    """Store handle for task bodies: GET/PUT proxied through the channel."""

    def __init__(self, agent: "WorkerAgent"):
        self._agent = agent

    def get(self, artifact_id: str) -> bytes:
        return self._agent.fetch_artifact(artifact_id)

    def put(self, artifact_id: str, data: bytes) -> None:
        self._agent.channel.send({
            "type": "PUT",
            "artifact_id": artifact_id,
            "bytes_b64": base64.b64encode(bytes(data)).decode("ascii"),
        })


class WorkerAgent:
    """Runs on every non-head node (and in-process on single-node heads)."""

    def __init__(self, head: HeadRecord, node_name: str, cpu_slots: int,
                 heartbeat_interval: float = HEARTBEAT_INTERVAL_S):
        self.head = head
        self.node_name = node_name
        self.cpu_slots = cpu_slots
        self.heartbeat_interval = heartbeat_interval
        self.registration: WorkerRegistration | None = None
        self.channel = None
        self._waiters: dict[str, list] = {}
        self._waiters_lock = threading.Lock()
        self._stopped = threading.Event()

    def run(self, stop: threading.Event | None = None) -> None:
        """Join the cluster and serve tasks until SHUTDOWN, EOF, or stop."""
        stop = stop or threading.Event()
        wc = open_worker_channel(self.head, self.node_name, self.cpu_slots)
        self.channel = wc.channel
        self.registration = wc.registration
        executor = ThreadPoolExecutor(
            max_workers=self.cpu_slots,
            thread_name_prefix=f"slot-{self.node_name}",
        )
        last_heartbeat = time.monotonic()
        log.info("%s joined as worker %d with %d slots",
                 self.node_name, self.registration.worker_id, self.cpu_slots)
        try:
            while not stop.is_set():
                try:
                    msg = self.channel.recv(timeout=0.25)
                except TimeoutError:
                    now = time.monotonic()
                    if now - last_heartbeat >= self.heartbeat_interval:
                        last_heartbeat = now
                        try:
                            self.channel.send({
                                "type": "HEARTBEAT",
                                "worker_id": self.registration.worker_id,
                            })
                        except NestorError:
                            break
                    continue
                except NestorError:
                    break
                if msg is None:
                    break  # head went away
                mtype = msg.get("type")
                if mtype == "TASK":
                    executor.submit(self._run_job, msg)
                elif mtype in ("GOT", "MISSING"):
                    self._resolve_get(msg)
                elif mtype == "SHUTDOWN":
                    break
                else:
                    log.debug("%s ignoring message %r", self.node_name, mtype)
        finally:
            self._stopped.set()
            self._fail_waiters()
            executor.shutdown(wait=False, cancel_futures=True)
            self.channel.close()
            log.info("%s stopped", self.node_name)

    # -- task execution -------------------------------------------------------

    def _run_job(self, msg: dict) -> None:
        job_id = str(msg.get("job_id"))
        params = dict(msg.get("params") or {})
        declared = frozenset(params.pop(PRODUCES_PARAM, ()))
        store = _RemoteStore(self)
        try:
            run_task(str(msg.get("task_kind")), params, store,
                     job_id=job_id, declared_produces=declared)
            result = {"type": "RESULT", "job_id": job_id, "status": "ok"}
        except BaseException as exc:  # noqa: BLE001 - task bodies are arbitrary
            log.debug("job %s failed:\n%s", job_id, traceback.format_exc())
            result = {
                "type": "RESULT",
                "job_id": job_id,
                "status": "error",
                "error": f"{type(exc).__name__}: {exc}",
            }
        try:
            self.channel.send(result)
        except NestorError:
            pass  # channel gone; head will fail the job as worker-lost

    # -- artifact fetch ----------------------------------------------------------

    def fetch_artifact(self, artifact_id: str, timeout: float = GET_TIMEOUT_S) -> bytes:
        waiter = {"event": threading.Event(), "payload": None, "found": False}
        with self._waiters_lock:
            self._waiters.setdefault(artifact_id, []).append(waiter)
        self.channel.send({"type": "GET", "artifact_id": artifact_id})
        if not waiter["event"].wait(timeout):
            raise ConnectionFailed(f"GET {artifact_id!r} timed out")
        if self._stopped.is_set() and not waiter["found"]:
            raise ConnectionFailed("worker stopping")
        if not waiter["found"]:
            raise ArtifactNotFound(f"no artifact {artifact_id!r}")
        return waiter["payload"]

    def _resolve_get(self, msg: dict) -> None:
        artifact_id = str(msg.get("artifact_id"))
        found = msg.get("type") == "GOT"
        payload = base64.b64decode(msg.get("bytes_b64", "") or "") if found else None
        with self._waiters_lock:
            waiters = self._waiters.pop(artifact_id, [])
        for waiter in waiters:
            waiter["found"] = found
            waiter["payload"] = payload
            waiter["event"].set()

    def _fail_waiters(self) -> None:
        with self._waiters_lock:
            pending = [w for ws in self._waiters.values() for w in ws]
            self._waiters.clear()
        for waiter in pending:
            waiter["event"].set()
