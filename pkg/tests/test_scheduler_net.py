"""Head/worker/client tests over real loopback TCP (one process)."""
from __future__ import annotations

import random
import time

import pytest

from dag_tools import check_dependency_order, oracle_executed, random_dag
from nestor.errors import (
    ArtifactNotFound,
    DuplicateArtifact,
    DuplicateJob,
    OversizedRequest,
    UnknownTaskKind,
)
from nestor.scheduler.types import JobPhase, JobSpec


def job(job_id, kind="sleep", params=None, deps=(), produces=(), cpu=1):
    return JobSpec(
        job_id=job_id,
        task_kind=kind,
        params=params if params is not None else {"seconds": 0},
        cpu_req=cpu,
        data_deps=frozenset(deps),
        produces=frozenset(produces),
    )


def test_echo_job_end_to_end(local_cluster_factory):
    cluster = local_cluster_factory([2])
    with cluster.client() as client:
        client.submit(job("e", kind="echo",
                          params={"artifact": "a", "text": "payload"},
                          produces={"a"}))
        statuses = client.wait(["e"], timeout=10)
        assert statuses["e"].phase is JobPhase.SUCCEEDED
        assert statuses["e"].worker_id == 1
        assert client.get_artifact("a") == b"payload"


def test_artifact_flows_between_workers(local_cluster_factory):
    cluster = local_cluster_factory([1, 1])
    with cluster.client() as client:
        client.submit(job("prod", kind="echo",
                          params={"artifact": "x", "text": "from-one"},
                          produces={"x"}))
        client.submit(job("cons", kind="concat",
                          params={"inputs": ["x", "x"], "output": "y", "sep": "|"},
                          deps={"x"}, produces={"y"}))
        client.wait(["prod", "cons"], timeout=10)
        assert client.get_artifact("y") == b"from-one|from-one"
        statuses = client.jobs()
        workers_used = {statuses["prod"].worker_id, statuses["cons"].worker_id}
        assert workers_used <= {1, 2}


def test_get_missing_artifact(local_cluster_factory):
    cluster = local_cluster_factory([1])
    with cluster.client() as client:
        with pytest.raises(ArtifactNotFound):
            client.get_artifact("nothing")


def test_client_put_get_roundtrip_and_duplicate(local_cluster_factory):
    cluster = local_cluster_factory([1])
    with cluster.client() as client:
        payload = bytes(range(256))
        client.put_artifact("blob", payload)
        assert client.get_artifact("blob") == payload
        with pytest.raises(DuplicateArtifact):
            client.put_artifact("blob", b"again")


def test_external_put_unblocks_job(local_cluster_factory):
    cluster = local_cluster_factory([1])
    with cluster.client() as client:
        client.submit(job("c", kind="concat",
                          params={"inputs": ["ext"], "output": "out"},
                          deps={"ext"}, produces={"out"}))
        time.sleep(0.2)
        assert client.job_status("c").phase is JobPhase.QUEUED
        client.put_artifact("ext", b"seed")
        statuses = client.wait(["c"], timeout=10)
        assert statuses["c"].phase is JobPhase.SUCCEEDED
        assert client.get_artifact("out") == b"seed"


def test_failed_task_reports_error_and_frees_slots(local_cluster_factory):
    cluster = local_cluster_factory([1])
    with cluster.client() as client:
        client.submit(job("bad", kind="fail", params={"message": "for test"}))
        statuses = client.wait(["bad"], timeout=10)
        assert statuses["bad"].phase is JobPhase.FAILED
        assert "for test" in statuses["bad"].error
        info = client.cluster_info()
        assert info["workers"][0]["cpu_slots_free"] == 1
        # slots really are free: a follow-up job runs
        client.submit(job("ok"))
        assert client.wait(["ok"], timeout=10)["ok"].phase is JobPhase.SUCCEEDED


def test_undeclared_artifact_fails_job(local_cluster_factory):
    cluster = local_cluster_factory([1])
    with cluster.client() as client:
        client.submit(job("rogue", kind="misbehave",
                          params={"artifact": "illicit"},
                          produces={"declared"}))
        statuses = client.wait(["rogue"], timeout=10)
        assert statuses["rogue"].phase is JobPhase.FAILED
        assert "undeclared" in statuses["rogue"].error
        with pytest.raises(ArtifactNotFound):
            client.get_artifact("illicit")


def test_submit_error_codes_cross_wire(local_cluster_factory):
    cluster = local_cluster_factory([2])
    with cluster.client() as client:
        client.submit(job("a"))
        with pytest.raises(DuplicateJob):
            client.submit(job("a"))
        with pytest.raises(UnknownTaskKind):
            client.submit(job("b", kind="nope", params={}))
        with pytest.raises(OversizedRequest):
            client.submit(job("c", cpu=3))
        client.wait(["a"], timeout=10)


def test_parallelism_up_to_slot_capacity(local_cluster_factory):
    cluster = local_cluster_factory([4, 4])
    with cluster.client() as client:
        ids = [f"s{i}" for i in range(8)]
        for job_id in ids:
            client.submit(job(job_id, params={"seconds": 0.4}))
        statuses = client.wait(ids, timeout=20)
        assert all(s.phase is JobPhase.SUCCEEDED for s in statuses.values())
        # all 8 were in flight together: max overlap computed from events
        events = client.events()
        overlap, peak = 0, 0
        for event in events:
            if event["kind"] == "dispatched":
                overlap += 1
                peak = max(peak, overlap)
            elif event["kind"] == "result":
                overlap -= 1
        assert peak == 8


def test_heartbeats_update_last_seen(local_cluster_factory):
    cluster = local_cluster_factory([1])
    core = cluster.server.core
    first = core.workers_snapshot()[0].last_seen
    deadline = time.monotonic() + 10
    while time.monotonic() < deadline:
        if core.workers_snapshot()[0].last_seen > first:
            break
        time.sleep(0.1)
    assert core.workers_snapshot()[0].last_seen > first


def test_shutdown_drains_workers(local_cluster_factory):
    cluster = local_cluster_factory([1, 1])
    with cluster.client() as client:
        client.shutdown_cluster()
    assert cluster.server.wait_closed(timeout=10)
    for thread in cluster.threads:
        thread.join(timeout=5)
        assert not thread.is_alive()


def test_random_dags_over_real_wire(local_cluster_factory):
    # smaller count than the in-core oracle suite: these cross real sockets
    rng = random.Random(314159)
    cluster = local_cluster_factory([3, 2, 1], cluster_id="dagwire")
    slots = [3, 2, 1]
    all_specs = []
    with cluster.client() as client:
        for trial in range(25):
            specs, externals, _slots, fail_jobs, _dead = random_dag(rng)
            # namespace ids per trial; reuse the fixed worker topology
            def ns(s):
                return f"t{trial}-{s}"

            specs = [
                JobSpec(
                    job_id=ns(s.job_id),
                    task_kind=s.task_kind,
                    params=s.params,
                    cpu_req=min(s.cpu_req, max(slots)),
                    data_deps=frozenset(ns(d) for d in s.data_deps),
                    produces=frozenset(ns(p) for p in s.produces),
                )
                for s in specs
            ]
            externals = {ns(e) for e in externals}
            fail_jobs = {ns(j) for j in fail_jobs}
            for artifact_id in sorted(externals):
                client.put_artifact(artifact_id, b"ext")
            for spec in specs:
                client.submit(spec)
            runnable = oracle_executed(specs, externals, slots, fail_jobs)
            deadline = time.monotonic() + 30
            while time.monotonic() < deadline:
                statuses = client.jobs()
                mine = {s.job_id: statuses[s.job_id] for s in specs}
                if all(
                    mine[j].phase in (JobPhase.SUCCEEDED, JobPhase.FAILED)
                    for j in runnable
                ):
                    break
                time.sleep(0.02)
            executed = {
                j for j, s in mine.items()
                if s.phase in (JobPhase.SUCCEEDED, JobPhase.FAILED)
            }
            assert executed == runnable, f"trial {trial}"
            all_specs.extend(specs)
    # happens-before holds over the whole multi-trial event log
    check_dependency_order(cluster.server.core.events, all_specs)
