"""Election, publication, discovery, and handshake tests."""
from __future__ import annotations

import json
import random
import threading
import time
from concurrent.futures import ThreadPoolExecutor

import pytest

from nestor.errors import (
    AuthRejected,
    ConnectionFailed,
    DiscoveryTimeout,
    MalformedRecord,
    NotHead,
)
from nestor.rendezvous import (
    FileStore,
    HeadRecord,
    PROTOCOL_VERSION,
    generate_token,
    handshake_join,
    open_worker_channel,
)
from nestor.scheduler.head import HeadServer


def make_record(cluster_id="c1", port=4242, epoch=1, **kw) -> HeadRecord:
    fields = dict(
        cluster_id=cluster_id,
        address="127.0.0.1",
        port=port,
        token=generate_token(),
        epoch=epoch,
        protocol_version=PROTOCOL_VERSION,
        created_at=int(time.time()),
    )
    fields.update(kw)
    return HeadRecord(**fields)


# --- record validation ---------------------------------------------------


def test_record_roundtrip_field_equal():
    record = make_record()
    assert HeadRecord.from_json_bytes(record.to_json_bytes()) == record


def test_record_json_has_exactly_the_published_keys():
    obj = json.loads(make_record().to_json_bytes())
    assert set(obj) == {"cluster_id", "address", "port", "token", "epoch",
                        "protocol_version", "created_at"}


@pytest.mark.parametrize("bad", [
    {"port": 0}, {"port": 65536}, {"token": "xyz"}, {"token": "a" * 31},
    {"protocol_version": 0}, {"epoch": 0}, {"cluster_id": ""},
])
def test_record_validation_rejects(bad):
    with pytest.raises(MalformedRecord):
        make_record(**bad).validate()


def test_generate_token_is_32_hex_chars():
    token = generate_token()
    assert len(token) == 32
    int(token, 16)


# --- election ---------------------------------------------------------------


def test_sole_contender_wins(store_root):
    store = FileStore(store_root)
    assert store.acquire_head_role("c1", "node0") is True


def test_lock_file_is_empty(store_root):
    store = FileStore(store_root)
    store.acquire_head_role("c1", "node0")
    assert (store_root / "c1" / "head.lock").read_bytes() == b""


def test_loser_after_winner(store_root):
    store = FileStore(store_root)
    assert store.acquire_head_role("c1", "node0") is True
    assert FileStore(store_root).acquire_head_role("c1", "node1") is False


def test_reacquire_after_winning_is_idempotent(store_root):
    store = FileStore(store_root)
    assert store.acquire_head_role("c1", "node0") is True
    assert store.acquire_head_role("c1", "node0") is True


def test_concurrent_election_single_winner(store_root):
    store = FileStore(store_root)
    rng = random.Random(7)
    for trial in range(30):
        cluster_id = f"trial-{trial}"
        contenders = rng.randint(2, 16)
        barrier = threading.Barrier(contenders)

        def race(i):
            handle = FileStore(store_root)
            barrier.wait()
            return handle.acquire_head_role(cluster_id, f"node{i}")

        with ThreadPoolExecutor(max_workers=contenders) as pool:
            results = list(pool.map(race, range(contenders)))
        assert sum(results) == 1, f"trial {trial}: {results}"
    del store


# --- publish / discover ------------------------------------------------------


def test_publish_then_discover_round_trip(store_root):
    store = FileStore(store_root)
    store.acquire_head_role("c1", "node0")
    record = make_record()
    store.publish_head(record)
    assert store.discover_head("c1", timeout=1) == record


def test_publish_without_election_raises(store_root):
    store = FileStore(store_root)
    with pytest.raises(NotHead):
        store.publish_head(make_record())


def test_publish_from_other_handle_raises(store_root):
    FileStore(store_root).acquire_head_role("c1", "node0")
    with pytest.raises(NotHead):
        FileStore(store_root).publish_head(make_record())


def test_epoch_monotonic_readers_observe_latest(store_root):
    store = FileStore(store_root)
    store.acquire_head_role("c1", "node0")
    assert store.next_epoch("c1") == 1
    store.publish_head(make_record(epoch=1))
    assert store.next_epoch("c1") == 2
    store.publish_head(make_record(epoch=2))
    assert store.discover_head("c1", timeout=1).epoch == 2


def test_discover_timeout(store_root):
    store = FileStore(store_root)
    t0 = time.monotonic()
    with pytest.raises(DiscoveryTimeout):
        store.discover_head("absent", timeout=1.0, poll_interval=0.05)
    assert 0.9 <= time.monotonic() - t0 < 3.0


def test_discover_returns_immediately_when_published(store_root):
    store = FileStore(store_root)
    store.acquire_head_role("c1", "node0")
    store.publish_head(make_record())
    t0 = time.monotonic()
    store.discover_head("c1", timeout=10, poll_interval=0.25)
    assert time.monotonic() - t0 < 0.25


def test_discover_sees_delayed_publication(store_root):
    store = FileStore(store_root)
    store.acquire_head_role("c1", "node0")
    record = make_record()
    poll = 0.1

    def publish_later():
        time.sleep(1.0)
        store.publish_head(record)

    t = threading.Thread(target=publish_later)
    t.start()
    t0 = time.monotonic()
    got = store.discover_head("c1", timeout=10, poll_interval=poll)
    elapsed = time.monotonic() - t0
    t.join()
    assert got == record
    assert 1.0 - poll <= elapsed <= 1.0 + 5 * poll + 0.5


def test_discover_malformed_record_raises(store_root):
    (store_root / "c1").mkdir()
    (store_root / "c1" / "head.json").write_text('{"cluster_id": "c1"}')
    with pytest.raises(MalformedRecord):
        FileStore(store_root).discover_head("c1", timeout=1)


def test_clear_cluster_allows_reelection(store_root):
    store = FileStore(store_root)
    store.acquire_head_role("c1", "node0")
    store.clear_cluster("c1")
    assert FileStore(store_root).acquire_head_role("c1", "node1") is True


# --- handshake ------------------------------------------------------------------


@pytest.fixture
def head_server():
    server = HeadServer("hs", token=generate_token(), expected_worker_slots=0)
    address, port = server.start()
    record = HeadRecord(
        cluster_id="hs", address=address, port=port, token=server.token,
        epoch=1, protocol_version=PROTOCOL_VERSION, created_at=int(time.time()),
    )
    yield server, record
    server.stop(drain_timeout=0.5)


def test_handshake_join_assigns_worker_id(head_server):
    _server, record = head_server
    registration = handshake_join(record, "nodeA", cpu_slots=4)
    assert registration.worker_id >= 1
    assert registration.cpu_slots == 4
    assert registration.node_name == "nodeA"


def test_handshake_wrong_token_rejected(head_server):
    server, record = head_server
    bad = make_record(cluster_id="hs", port=record.port,
                      token=generate_token())
    bad = HeadRecord(**{**bad.__dict__, "address": record.address})
    with pytest.raises(AuthRejected):
        handshake_join(bad, "nodeA", cpu_slots=1)
    assert server.core.workers_snapshot() == []


def test_handshake_version_mismatch_rejected(head_server, monkeypatch):
    _server, record = head_server
    monkeypatch.setattr("nestor.rendezvous.PROTOCOL_VERSION", 99)
    with pytest.raises(Exception) as err:
        handshake_join(record, "nodeA", cpu_slots=1)
    assert "version" in str(err.value).lower()


def test_handshake_connection_refused():
    record = make_record(port=1)  # nothing listens on port 1
    with pytest.raises(ConnectionFailed):
        handshake_join(record, "nodeA", cpu_slots=1, timeout=0.5)


def test_thirty_one_workers_get_dense_ids(head_server):
    server, record = head_server
    channels = [open_worker_channel(record, f"node{i}", cpu_slots=28)
                for i in range(31)]
    ids = sorted(c.registration.worker_id for c in channels)
    assert ids == list(range(1, 32))
    assert server.core.worker_slot_total() == 31 * 28
    for c in channels:
        c.close()
