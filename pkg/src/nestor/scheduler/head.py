"""The head node's TCP server: single entry point of the cluster.

Every connection speaks newline-delimited JSON. Workers introduce
themselves with HELLO and then hold a duplex channel:

    head -> worker   TASK{job_id, task_kind, params, deps}, GOT{...},
                     MISSING{...}, SHUTDOWN{}
    worker -> head   RESULT{job_id, status, error?},
                     PUT{artifact_id, bytes_b64}, GET{artifact_id},
                     HEARTBEAT{worker_id}

Because a worker's PUTs precede its RESULT on the same ordered
connection, an artifact is always visible in the store before its
producing job is observed as Succeeded.

Control clients authenticate with AUTH{token} and then use a
request/reply vocabulary (SUBMIT, STATUS, JOBS, CLUSTER, EVENTS, PUT,
GET, SHUTDOWN); replies are OK{...}/ERR{code,message} or GOT/MISSING.

All scheduler state is owned by one event-loop thread; reader threads
only push parsed messages into its queue.
"""
from __future__ import annotations

import base64
import binascii
import logging
import queue
import socket
import threading
import time
from dataclasses import dataclass, field

from .. import wire
from ..errors import (
    DuplicateArtifact,
    DuplicateJob,
    NestorError,
    OversizedRequest,
    UnknownJob,
    UnknownTaskKind,
)
from ..rendezvous import (
    PROTOCOL_VERSION,
    REJECT_BAD_TOKEN,
    REJECT_VERSION_MISMATCH,
)
from .core import SchedulerCore
from .types import Artifact, JobSpec, PRODUCES_PARAM

log = logging.getLogger(__name__)

DRAIN_TIMEOUT_S = 5.0

_ERR_CODES = {
    DuplicateJob: "duplicate-job",
    UnknownTaskKind: "unknown-task-kind",
    OversizedRequest: "oversized-request",
    DuplicateArtifact: "duplicate-artifact",
    UnknownJob: "unknown-job",
}


@dataclass
class _Conn:
    channel: wire.LineChannel
    kind: str = "new"  # new | worker | client
    worker_id: int | None = None
    name: str = ""
    reader: threading.Thread | None = None
    closed: bool = field(default=False)


class HeadServer:
    def __init__(
        self,
        cluster_id: str,
        token: str,
        *,
        bind_host: str = "127.0.0.1",
        port: int = 0,
        expected_worker_slots: int = 0,
    ):
        self.cluster_id = cluster_id
        self.token = token
        self.expected_worker_slots = expected_worker_slots
        self.core = SchedulerCore()
        self._listener = socket.create_server((bind_host, port), backlog=128)
        self.address, self.port = self._listener.getsockname()[:2]
        self._inbox: queue.Queue = queue.Queue()
        self._conns: list[_Conn] = []
        self._conns_lock = threading.Lock()
        self._stopping = threading.Event()
        self._draining = False
        self._drain_deadline = 0.0
        self.closed = threading.Event()
        self._accept_thread: threading.Thread | None = None
        self._loop_thread: threading.Thread | None = None

    # -- lifecycle ---------------------------------------------------------

    def start(self) -> tuple[str, int]:
        self._accept_thread = threading.Thread(
            target=self._accept_loop, name=f"head-accept-{self.cluster_id}", daemon=True
        )
        self._loop_thread = threading.Thread(
            target=self._event_loop, name=f"head-loop-{self.cluster_id}", daemon=True
        )
        self._accept_thread.start()
        self._loop_thread.start()
        log.info("head %s listening on %s:%d", self.cluster_id, self.address, self.port)
        return self.address, self.port

    def stop(self, drain_timeout: float = DRAIN_TIMEOUT_S) -> None:
        """Initiate shutdown from outside the event loop (agent signal path)."""
        self._inbox.put(("_shutdown", None, drain_timeout))
        self.closed.wait(drain_timeout + 2.0)
        self._finalize()

    def wait_closed(self, timeout: float | None = None) -> bool:
        return self.closed.wait(timeout)

    def _finalize(self) -> None:
        self._stopping.set()
        try:
            self._listener.close()
        except OSError:
            pass
        with self._conns_lock:
            conns = list(self._conns)
        for conn in conns:
            conn.channel.close()
        self.closed.set()

    # -- accept + readers ----------------------------------------------------

    def _accept_loop(self) -> None:
        while not self._stopping.is_set():
            try:
                sock, _addr = self._listener.accept()
            except OSError:
                return
            conn = _Conn(channel=wire.LineChannel(sock))
            with self._conns_lock:
                self._conns.append(conn)
            conn.reader = threading.Thread(
                target=self._reader_loop, args=(conn,), daemon=True,
                name=f"head-reader-{self.cluster_id}",
            )
            conn.reader.start()

    def _reader_loop(self, conn: _Conn) -> None:
        while True:
            try:
                msg = conn.channel.recv()
            except NestorError:
                msg = None
            self._inbox.put(("msg", conn, msg))
            if msg is None:
                return

    # -- event loop ------------------------------------------------------------

    def _event_loop(self) -> None:
        while True:
            try:
                item = self._inbox.get(timeout=0.2)
            except queue.Empty:
                if self._draining and self._drain_done():
                    self._finalize()
                    return
                continue
            kind = item[0]
            if kind == "_shutdown":
                self._begin_drain(item[2])
                if self._drain_done():
                    self._finalize()
                    return
                continue
            _, conn, msg = item
            if msg is None:
                self._on_eof(conn)
            else:
                try:
                    self._handle(conn, msg)
                except NestorError as exc:
                    log.warning("dropping bad message from %s: %s", conn.name, exc)
            if self._draining and self._drain_done():
                self._finalize()
                return

    def _drain_done(self) -> bool:
        with self._conns_lock:
            workers_left = [c for c in self._conns if c.kind == "worker" and not c.closed]
        return not workers_left or time.monotonic() > self._drain_deadline

    def _begin_drain(self, drain_timeout: float) -> None:
        if self._draining:
            return
        self._draining = True
        self._drain_deadline = time.monotonic() + drain_timeout
        with self._conns_lock:
            conns = list(self._conns)
        for conn in conns:
            if conn.kind == "worker" and not conn.closed:
                self._safe_send(conn, {"type": "SHUTDOWN"})

    def _on_eof(self, conn: _Conn) -> None:
        conn.closed = True
        conn.channel.close()
        if conn.kind == "worker" and conn.worker_id is not None:
            self.core.mark_worker_lost(conn.worker_id)
            self._dispatch()
        with self._conns_lock:
            if conn in self._conns:
                self._conns.remove(conn)

    def _safe_send(self, conn: _Conn, msg: dict) -> bool:
        try:
            conn.channel.send(msg)
            return True
        except NestorError:
            conn.closed = True
            return False

    # -- dispatch ---------------------------------------------------------------

    def _worker_conn(self, worker_id: int) -> _Conn | None:
        with self._conns_lock:
            for conn in self._conns:
                if conn.kind == "worker" and conn.worker_id == worker_id:
                    return conn
        return None

    def _dispatch(self) -> None:
        for assignment in self.core.tick():
            spec = assignment.spec
            conn = self._worker_conn(assignment.worker_id)
            params = dict(spec.params)
            params[PRODUCES_PARAM] = sorted(spec.produces)
            msg = {
                "type": "TASK",
                "job_id": spec.job_id,
                "task_kind": spec.task_kind,
                "params": params,
                "deps": sorted(spec.data_deps),
            }
            if conn is None or not self._safe_send(conn, msg):
                log.warning("worker %d unreachable; failing job %s",
                            assignment.worker_id, spec.job_id)
                self.core.mark_worker_lost(assignment.worker_id)

    # -- message handling -----------------------------------------------------------

    def _handle(self, conn: _Conn, msg: dict) -> None:
        mtype = msg.get("type")
        if mtype == "HELLO":
            self._on_hello(conn, msg)
        elif mtype == "AUTH":
            self._on_auth(conn, msg)
        elif mtype == "RESULT" and conn.kind == "worker":
            ok = msg.get("status") == "ok"
            error = None if ok else str(msg.get("error") or "unknown error")
            if ok and not self._declared_complete(msg.get("job_id", "")):
                ok, error = False, "contract: declared artifact missing after success"
            try:
                self.core.on_result(str(msg.get("job_id")), ok=ok, error=error)
            except (UnknownJob, ValueError) as exc:
                log.warning("unexpected RESULT: %s", exc)
            self._dispatch()
        elif mtype == "PUT":
            self._on_put(conn, msg)
        elif mtype == "GET":
            self._on_get(conn, msg)
        elif mtype == "HEARTBEAT" and conn.kind == "worker":
            self.core.heartbeat(int(msg.get("worker_id", 0)))
        elif conn.kind == "client":
            self._on_client(conn, msg)
        else:
            log.warning("ignoring %r from %s connection", mtype, conn.kind)

    def _declared_complete(self, job_id: str) -> bool:
        try:
            spec = self.core.job_spec(job_id)
        except UnknownJob:
            return True
        return all(a in self.core.store for a in spec.produces)

    def _on_hello(self, conn: _Conn, msg: dict) -> None:
        if str(msg.get("token", "")) != self.token:
            self._safe_send(conn, {"type": "REJECT", "reason": REJECT_BAD_TOKEN})
            conn.channel.close()
            return
        if int(msg.get("protocol_version", -1)) != PROTOCOL_VERSION:
            self._safe_send(conn, {"type": "REJECT", "reason": REJECT_VERSION_MISMATCH})
            conn.channel.close()
            return
        node_name = str(msg.get("node_name", ""))
        cpu_slots = int(msg.get("cpu_slots", 0))
        if cpu_slots < 1:
            self._safe_send(conn, {"type": "REJECT", "reason": "bad-cpu-slots"})
            conn.channel.close()
            return
        worker_id = self.core.add_worker(node_name, cpu_slots,
                                         address=conn.channel.peername()[0])
        conn.kind = "worker"
        conn.worker_id = worker_id
        conn.name = f"worker-{worker_id}({node_name})"
        self._safe_send(conn, {"type": "WELCOME", "worker_id": worker_id})
        self._dispatch()

    def _on_auth(self, conn: _Conn, msg: dict) -> None:
        if str(msg.get("token", "")) != self.token:
            self._safe_send(conn, {"type": "ERR", "code": "auth",
                                   "message": "bad token"})
            conn.channel.close()
            return
        conn.kind = "client"
        conn.name = "client"
        self._safe_send(conn, {"type": "OK"})

    def _on_put(self, conn: _Conn, msg: dict) -> None:
        if conn.kind not in ("worker", "client"):
            return
        artifact_id = str(msg.get("artifact_id", ""))
        try:
            payload = base64.b64decode(msg.get("bytes_b64", "") or "")
        except (binascii.Error, ValueError):
            if conn.kind == "client":
                self._safe_send(conn, {"type": "ERR", "code": "bad-payload",
                                       "message": "bytes_b64 does not decode"})
            return
        producer = self.core.claimed_producer(artifact_id)
        try:
            self.core.put_artifact(Artifact(artifact_id=artifact_id, payload=payload,
                                            producer=producer))
        except (DuplicateArtifact, ValueError) as exc:
            if conn.kind == "client":
                self._safe_send(conn, {"type": "ERR",
                                       "code": _ERR_CODES.get(type(exc), "invalid"),
                                       "message": str(exc)})
            else:
                log.warning("worker PUT rejected: %s", exc)
            return
        if conn.kind == "client":
            self._safe_send(conn, {"type": "OK", "artifact_id": artifact_id})
        self._dispatch()

    def _on_get(self, conn: _Conn, msg: dict) -> None:
        if conn.kind not in ("worker", "client"):
            return
        artifact_id = str(msg.get("artifact_id", ""))
        if artifact_id in self.core.store:
            payload = self.core.store.get(artifact_id).payload
            self._safe_send(conn, {
                "type": "GOT",
                "artifact_id": artifact_id,
                "bytes_b64": base64.b64encode(payload).decode("ascii"),
            })
        else:
            self._safe_send(conn, {"type": "MISSING", "artifact_id": artifact_id})

    def _on_client(self, conn: _Conn, msg: dict) -> None:
        mtype = msg.get("type")
        if mtype == "SUBMIT":
            try:
                spec = JobSpec.from_wire(msg.get("job") or {})
                job_id = self.core.submit(spec)
            except NestorError as exc:
                self._safe_send(conn, {"type": "ERR",
                                       "code": _ERR_CODES.get(type(exc), "invalid"),
                                       "message": str(exc)})
                return
            except (KeyError, TypeError, ValueError) as exc:
                self._safe_send(conn, {"type": "ERR", "code": "invalid-job",
                                       "message": str(exc)})
                return
            self._safe_send(conn, {"type": "OK", "job_id": job_id})
            self._dispatch()
        elif mtype == "STATUS":
            try:
                status = self.core.job_status(str(msg.get("job_id")))
            except UnknownJob as exc:
                self._safe_send(conn, {"type": "ERR", "code": "unknown-job",
                                       "message": str(exc)})
                return
            self._safe_send(conn, {"type": "OK", "status": status.to_wire()})
        elif mtype == "JOBS":
            snapshot = {j: s.to_wire() for j, s in self.core.jobs_snapshot().items()}
            self._safe_send(conn, {"type": "OK", "jobs": snapshot})
        elif mtype == "CLUSTER":
            self._safe_send(conn, {"type": "OK", "cluster": self._cluster_info()})
        elif mtype == "EVENTS":
            self._safe_send(conn, {"type": "OK",
                                   "events": [e.to_wire() for e in self.core.events]})
        elif mtype == "SHUTDOWN":
            self._safe_send(conn, {"type": "OK"})
            self._begin_drain(DRAIN_TIMEOUT_S)
        else:
            self._safe_send(conn, {"type": "ERR", "code": "unknown-type",
                                   "message": f"unsupported message {mtype!r}"})

    def _cluster_info(self) -> dict:
        workers = [
            {
                "worker_id": w.worker_id,
                "node_name": w.node_name,
                "cpu_slots_total": w.cpu_slots_total,
                "cpu_slots_free": w.cpu_slots_free,
                "connected": w.connected,
                "address": w.address,
            }
            for w in sorted(self.core.workers_snapshot(), key=lambda w: w.worker_id)
        ]
        slot_total = self.core.worker_slot_total()
        return {
            "cluster_id": self.cluster_id,
            "address": self.address,
            "port": self.port,
            "expected_worker_slots": self.expected_worker_slots,
            "worker_slot_total": slot_total,
            "formed": bool(self.expected_worker_slots)
            and slot_total == self.expected_worker_slots,
            "workers": workers,
        }
