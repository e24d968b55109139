"""Control client: talks to the head's single entry point.

Strictly sequential request/reply over one authenticated connection.
Used by the orchestrator, the benchmark harness, and the CLI.
"""
from __future__ import annotations

import base64
import threading
import time

from .. import wire
from ..errors import (
    ArtifactNotFound,
    AuthRejected,
    ConnectionFailed,
    DuplicateArtifact,
    DuplicateJob,
    NestorError,
    OversizedRequest,
    UnknownJob,
    UnknownTaskKind,
)
from ..rendezvous import HeadRecord
from .types import JobSpec, JobStatus, is_terminal

_CODE_TO_ERROR = {
    "duplicate-job": DuplicateJob,
    "unknown-task-kind": UnknownTaskKind,
    "oversized-request": OversizedRequest,
    "duplicate-artifact": DuplicateArtifact,
    "unknown-job": UnknownJob,
    "auth": AuthRejected,
}

DEFAULT_REQUEST_TIMEOUT_S = 60.0


class ClusterClient:
    def __init__(self, channel: wire.LineChannel):
        self._channel = channel
        self._lock = threading.Lock()

    @classmethod
    def connect(cls, record: HeadRecord, timeout: float = 10.0) -> "ClusterClient":
        channel = wire.connect(record.address, record.port, timeout=timeout)
        client = cls(channel)
        reply = client._request({"type": "AUTH", "token": record.token},
                                timeout=timeout)
        if reply.get("type") != "OK":
            channel.close()
            raise AuthRejected(reply.get("message", "authentication failed"))
        return client

    def close(self) -> None:
        self._channel.close()

    def __enter__(self) -> "ClusterClient":
        return self

    def __exit__(self, *_exc) -> None:
        self.close()

    def _request(self, msg: dict, timeout: float = DEFAULT_REQUEST_TIMEOUT_S) -> dict:
        with self._lock:
            self._channel.send(msg)
            try:
                reply = self._channel.recv(timeout=timeout)
            except TimeoutError as exc:
                raise ConnectionFailed("head did not reply in time") from exc
        if reply is None:
            raise ConnectionFailed("head closed the connection")
        return reply

    @staticmethod
    def _raise_err(reply: dict) -> None:
        if reply.get("type") == "ERR":
            err = _CODE_TO_ERROR.get(reply.get("code", ""), NestorError)
            raise err(reply.get("message", reply.get("code", "request failed")))

    # -- operations ---------------------------------------------------------

    def submit(self, spec: JobSpec) -> str:
        reply = self._request({"type": "SUBMIT", "job": spec.to_wire()})
        self._raise_err(reply)
        return reply["job_id"]

    def job_status(self, job_id: str) -> JobStatus:
        reply = self._request({"type": "STATUS", "job_id": job_id})
        self._raise_err(reply)
        return JobStatus.from_wire(reply["status"])

    def jobs(self) -> dict[str, JobStatus]:
        reply = self._request({"type": "JOBS"})
        self._raise_err(reply)
        return {j: JobStatus.from_wire(s) for j, s in reply["jobs"].items()}

    def cluster_info(self) -> dict:
        reply = self._request({"type": "CLUSTER"})
        self._raise_err(reply)
        return reply["cluster"]

    def events(self) -> list[dict]:
        reply = self._request({"type": "EVENTS"})
        self._raise_err(reply)
        return reply["events"]

    def put_artifact(self, artifact_id: str, data: bytes) -> None:
        reply = self._request({
            "type": "PUT",
            "artifact_id": artifact_id,
            "bytes_b64": base64.b64encode(bytes(data)).decode("ascii"),
        })
        self._raise_err(reply)

    def get_artifact(self, artifact_id: str) -> bytes:
        reply = self._request({"type": "GET", "artifact_id": artifact_id})
        self._raise_err(reply)
        if reply.get("type") == "MISSING":
            raise ArtifactNotFound(f"no artifact {artifact_id!r}")
        return base64.b64decode(reply.get("bytes_b64", "") or "")

    def wait(
        self,
        job_ids: list[str],
        timeout: float = 300.0,
        poll_interval: float = 0.05,
    ) -> dict[str, JobStatus]:
        """Poll until every listed job is terminal; returns final statuses."""
        deadline = time.monotonic() + timeout
        while True:
            statuses = self.jobs()
            mine = {j: statuses[j] for j in job_ids if j in statuses}
            if len(mine) == len(job_ids) and all(
                is_terminal(s.phase) for s in mine.values()
            ):
                return mine
            if time.monotonic() >= deadline:
                raise TimeoutError(f"jobs not terminal within {timeout:.1f}s")
            time.sleep(poll_interval)

    def shutdown_cluster(self) -> None:
        reply = self._request({"type": "SHUTDOWN"})
        self._raise_err(reply)
