"""Shared fixtures: temp stores, in-process clusters, orphan audits."""
from __future__ import annotations

import os
import threading
import time

import pytest

from nestor.rendezvous import HeadRecord, PROTOCOL_VERSION, generate_token
from nestor.scheduler.client import ClusterClient
from nestor.scheduler.head import HeadServer
from nestor.scheduler.worker import WorkerAgent


def pid_alive(pid: int) -> bool:
    try:
        os.kill(pid, 0)
        return True
    except (ProcessLookupError, PermissionError):
        return False


def wait_pids_dead(pids, timeout: float) -> bool:
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        if not any(pid_alive(p) for p in pids):
            return True
        time.sleep(0.05)
    return not any(pid_alive(p) for p in pids)


class LocalCluster:
    """Head plus workers in one process, over real loopback TCP."""

    def __init__(self, worker_slots: list[int], cluster_id: str = "local"):
        self.server = HeadServer(
            cluster_id,
            token=generate_token(),
            expected_worker_slots=sum(worker_slots),
        )
        address, port = self.server.start()
        self.record = HeadRecord(
            cluster_id=cluster_id,
            address=address,
            port=port,
            token=self.server.token,
            epoch=1,
            protocol_version=PROTOCOL_VERSION,
            created_at=int(time.time()),
        )
        self.stop = threading.Event()
        self.workers = []
        self.threads = []
        for i, slots in enumerate(worker_slots):
            agent = WorkerAgent(self.record, f"lw{i}", slots)
            thread = threading.Thread(target=agent.run, args=(self.stop,), daemon=True)
            thread.start()
            self.workers.append(agent)
            self.threads.append(thread)
        deadline = time.monotonic() + 10
        while time.monotonic() < deadline:
            if self.server.core.worker_slot_total() == sum(worker_slots):
                break
            time.sleep(0.01)
        else:
            raise RuntimeError("local cluster did not form")

    def client(self) -> ClusterClient:
        return ClusterClient.connect(self.record)

    def close(self) -> None:
        self.stop.set()
        self.server.stop(drain_timeout=2.0)
        for thread in self.threads:
            thread.join(timeout=2.0)


@pytest.fixture
def local_cluster_factory():
    clusters = []

    def make(worker_slots, cluster_id="local"):
        cluster = LocalCluster(worker_slots, cluster_id=cluster_id)
        clusters.append(cluster)
        return cluster

    yield make
    for cluster in clusters:
        cluster.close()


@pytest.fixture
def store_root(tmp_path):
    root = tmp_path / "store"
    root.mkdir()
    return root
