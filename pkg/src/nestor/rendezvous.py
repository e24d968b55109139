"""Shared-store rendezvous: head election, record publication, discovery.

Identically launched node agents race an atomic create-if-absent on a lock
key in a store all of them can reach. The single winner becomes the head,
binds a TCP port, and publishes a HeadRecord under a well-known key; the
losers poll for that record and then join the head over TCP with a
HELLO/WELCOME handshake.

File backend layout (all nodes see the same directory tree):

    <root>/<cluster_id>/head.lock   empty file, created atomically
    <root>/<cluster_id>/head.json   one JSON object, written temp-then-rename

head.json carries exactly the keys ``cluster_id, address, port, token,
epoch, protocol_version, created_at``.
"""
from __future__ import annotations

import abc
import json
import os
import secrets
import threading
import time
from dataclasses import dataclass
from pathlib import Path

from . import wire
from .errors import (
    AuthRejected,
    ConnectionFailed,
    DiscoveryTimeout,
    MalformedRecord,
    NotHead,
    StoreUnreachable,
    VersionMismatch,
)

PROTOCOL_VERSION = 1
TOKEN_HEX_CHARS = 32

DEFAULT_POLL_INTERVAL_S = 0.25
DEFAULT_DISCOVERY_TIMEOUT_S = 60.0

HEAD_LOCK_NAME = "head.lock"
HEAD_RECORD_NAME = "head.json"

_RECORD_KEYS = ("cluster_id", "address", "port", "token", "epoch",
                "protocol_version", "created_at")

# Reject reason codes carried in REJECT messages.
REJECT_BAD_TOKEN = "bad-token"
REJECT_VERSION_MISMATCH = "version-mismatch"


def generate_token() -> str:
    """128-bit random value, hex encoded (32 chars)."""
    return secrets.token_hex(16)


@dataclass(frozen=True)
class HeadRecord:
    """The published identity of the elected head node."""

    cluster_id: str
    address: str
    port: int
    token: str
    epoch: int
    protocol_version: int
    created_at: int  # UTC seconds

    def validate(self) -> None:
        if not self.cluster_id:
            raise MalformedRecord("empty cluster_id")
        if not self.address:
            raise MalformedRecord("empty address")
        if not (1 <= self.port <= 65535):
            raise MalformedRecord(f"port out of range: {self.port}")
        if len(self.token) != TOKEN_HEX_CHARS or any(
            c not in "0123456789abcdef" for c in self.token.lower()
        ):
            raise MalformedRecord("token must be 32 hex characters")
        if self.epoch < 1:
            raise MalformedRecord(f"epoch must be >= 1, got {self.epoch}")
        if self.protocol_version < 1:
            raise MalformedRecord("protocol_version must be >= 1")

    def to_json_bytes(self) -> bytes:
        obj = {k: getattr(self, k) for k in _RECORD_KEYS}
        return json.dumps(obj).encode("utf-8")

    @classmethod
    def from_json_bytes(cls, data: bytes) -> "HeadRecord":
        try:
            obj = json.loads(data.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise MalformedRecord(f"head record is not valid JSON: {exc}") from exc
        if not isinstance(obj, dict) or set(obj) != set(_RECORD_KEYS):
            raise MalformedRecord("head record keys differ from the published schema")
        try:
            record = cls(
                cluster_id=str(obj["cluster_id"]),
                address=str(obj["address"]),
                port=int(obj["port"]),
                token=str(obj["token"]),
                epoch=int(obj["epoch"]),
                protocol_version=int(obj["protocol_version"]),
                created_at=int(obj["created_at"]),
            )
        except (TypeError, ValueError) as exc:
            raise MalformedRecord(f"head record field has wrong type: {exc}") from exc
        record.validate()
        return record


@dataclass(frozen=True)
class WorkerRegistration:
    """Outcome of a successful join handshake."""

    worker_id: int
    node_name: str
    cpu_slots: int
    address: str


class RendezvousStore(abc.ABC):
    """Shared location through which agents elect and discover the head.

    Implementations must make create-if-absent atomic across concurrent
    creators and publication atomic with respect to readers (no torn
    reads). The handle is immutable apart from election bookkeeping and is
    safe to share across threads.
    """

    @abc.abstractmethod
    def acquire_head_role(self, cluster_id: str, node_name: str) -> bool:
        """Try to win the head election. True for exactly one node per epoch."""

    @abc.abstractmethod
    def publish_head(self, record: HeadRecord) -> None:
        """Durably publish the head record. Caller must have won the election."""

    @abc.abstractmethod
    def discover_head(
        self,
        cluster_id: str,
        timeout: float = DEFAULT_DISCOVERY_TIMEOUT_S,
        poll_interval: float = DEFAULT_POLL_INTERVAL_S,
    ) -> HeadRecord:
        """Poll for the published head record until it appears or timeout."""


class FileStore(RendezvousStore):
    """Rendezvous over a directory on storage shared by all nodes.

    Election rides on O_CREAT|O_EXCL (atomic on POSIX filesystems);
    publication uses write-temp-then-rename so readers either see the
    whole record or none of it. Because head.lock is pinned to an empty
    file, election ownership is remembered on the store handle itself:
    the process that won through this handle may publish, nobody else.
    """

    def __init__(self, root: os.PathLike | str):
        self.root = Path(root)
        self._won: dict[str, str] = {}
        self._won_lock = threading.Lock()

    def _cluster_dir(self, cluster_id: str) -> Path:
        return self.root / cluster_id

    def acquire_head_role(self, cluster_id: str, node_name: str) -> bool:
        with self._won_lock:
            if self._won.get(cluster_id) == node_name:
                return True
        lock_path = self._cluster_dir(cluster_id) / HEAD_LOCK_NAME
        try:
            lock_path.parent.mkdir(parents=True, exist_ok=True)
            fd = os.open(lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            return False
        except OSError as exc:
            raise StoreUnreachable(f"cannot access {lock_path}: {exc}") from exc
        os.close(fd)
        with self._won_lock:
            self._won[cluster_id] = node_name
        return True

    def publish_head(self, record: HeadRecord) -> None:
        record.validate()
        with self._won_lock:
            if record.cluster_id not in self._won:
                raise NotHead(
                    f"this handle did not win the election for {record.cluster_id!r}"
                )
        target = self._cluster_dir(record.cluster_id) / HEAD_RECORD_NAME
        tmp = target.with_name(f".{HEAD_RECORD_NAME}.{os.getpid()}.tmp")
        try:
            with open(tmp, "wb") as fh:
                fh.write(record.to_json_bytes())
                fh.flush()
                os.fsync(fh.fileno())
            os.replace(tmp, target)
        except OSError as exc:
            raise StoreUnreachable(f"cannot publish {target}: {exc}") from exc

    def read_head(self, cluster_id: str) -> HeadRecord | None:
        """One-shot read; None if nothing is published yet."""
        path = self._cluster_dir(cluster_id) / HEAD_RECORD_NAME
        try:
            data = path.read_bytes()
        except FileNotFoundError:
            return None
        except OSError as exc:
            raise StoreUnreachable(f"cannot read {path}: {exc}") from exc
        return HeadRecord.from_json_bytes(data)

    def discover_head(
        self,
        cluster_id: str,
        timeout: float = DEFAULT_DISCOVERY_TIMEOUT_S,
        poll_interval: float = DEFAULT_POLL_INTERVAL_S,
    ) -> HeadRecord:
        if timeout <= 0 or poll_interval <= 0:
            raise ValueError("timeout and poll_interval must be positive")
        deadline = time.monotonic() + timeout
        while True:
            record = self.read_head(cluster_id)
            if record is not None:
                return record
            if time.monotonic() >= deadline:
                raise DiscoveryTimeout(
                    f"no head record for {cluster_id!r} within {timeout:.1f}s"
                )
            time.sleep(min(poll_interval, max(0.0, deadline - time.monotonic())))

    def next_epoch(self, cluster_id: str) -> int:
        """Epoch a restarting head should publish: previous epoch + 1."""
        try:
            record = self.read_head(cluster_id)
        except MalformedRecord:
            return 1
        return 1 if record is None else record.epoch + 1

    def clear_cluster(self, cluster_id: str) -> None:
        """Remove the rendezvous keys so the cluster_id can be reused."""
        for name in (HEAD_RECORD_NAME, HEAD_LOCK_NAME):
            try:
                (self._cluster_dir(cluster_id) / name).unlink()
            except FileNotFoundError:
                pass
            except OSError as exc:
                raise StoreUnreachable(f"cannot clear {cluster_id!r}: {exc}") from exc
        with self._won_lock:
            self._won.pop(cluster_id, None)


# --- join handshake (worker side) --------------------------------------------
#
# First message client -> head:
#   {"type":"HELLO","token":...,"protocol_version":...,"node_name":...,"cpu_slots":...}
# Reply:
#   {"type":"WELCOME","worker_id":...}  or  {"type":"REJECT","reason":...}


class WorkerChannel:
    """An authenticated, open connection to the head, plus the registration."""

    def __init__(self, channel: wire.LineChannel, registration: WorkerRegistration):
        self.channel = channel
        self.registration = registration

    def close(self) -> None:
        self.channel.close()


def open_worker_channel(
    head: HeadRecord,
    node_name: str,
    cpu_slots: int,
    timeout: float = 10.0,
) -> WorkerChannel:
    """HELLO/WELCOME exchange that leaves the connection open for task traffic."""
    if cpu_slots < 1:
        raise ValueError("cpu_slots must be >= 1")
    channel = wire.connect(head.address, head.port, timeout=timeout)
    try:
        channel.send({
            "type": "HELLO",
            "token": head.token,
            "protocol_version": PROTOCOL_VERSION,
            "node_name": node_name,
            "cpu_slots": cpu_slots,
        })
        try:
            reply = channel.recv(timeout=timeout)
        except TimeoutError as exc:
            raise ConnectionFailed("head did not answer HELLO in time") from exc
        if reply is None:
            raise ConnectionFailed("head closed the connection during handshake")
        if reply.get("type") == "WELCOME":
            registration = WorkerRegistration(
                worker_id=int(reply["worker_id"]),
                node_name=node_name,
                cpu_slots=cpu_slots,
                address=channel.sockname()[0],
            )
            return WorkerChannel(channel, registration)
        if reply.get("type") == "REJECT":
            reason = reply.get("reason", "")
            if reason == REJECT_BAD_TOKEN:
                raise AuthRejected("head rejected the join token")
            if reason == REJECT_VERSION_MISMATCH:
                raise VersionMismatch("head speaks a different protocol version")
            raise ConnectionFailed(f"head rejected join: {reason}")
        raise ConnectionFailed(f"unexpected handshake reply: {reply.get('type')!r}")
    except BaseException:
        channel.close()
        raise


def handshake_join(
    head: HeadRecord,
    node_name: str,
    cpu_slots: int,
    timeout: float = 10.0,
) -> WorkerRegistration:
    """Join the cluster and return the assigned registration.

    This is the probe form: it closes the connection after the exchange.
    Long-lived workers use open_worker_channel and keep the channel.
    """
    wc = open_worker_channel(head, node_name, cpu_slots, timeout=timeout)
    wc.close()
    return wc.registration
