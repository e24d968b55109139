"""Node-agent entry point: ``python -m nestor.agent``.

Every allocated node runs one copy of this program; behavior differs only
through the NESTOR_* environment. The agent waits for its bundle to be
staged, reads the cluster configuration from it, then races the head
election. The winner starts the head server and publishes its address;
the losers discover the head and serve as workers.

The agent enforces its own walltime: at expiry it begins a clean
shutdown, and a few seconds later it hard-exits no matter what. Agents
never outlive their allocation even if the launching process is gone.
"""
from __future__ import annotations

import json
import logging
import os
import signal
import sys
import threading
import time
from pathlib import Path

from . import fabric
from .errors import DiscoveryTimeout, NestorError, StoreUnreachable
from .rendezvous import (
    DEFAULT_POLL_INTERVAL_S,
    FileStore,
    HeadRecord,
    PROTOCOL_VERSION,
    generate_token,
)
from .scheduler.head import HeadServer
from .scheduler.worker import WorkerAgent

log = logging.getLogger("nestor.agent")

CLUSTER_CONFIG_ENTRY = "cluster.json"
BUNDLE_WAIT_TIMEOUT_S = 60.0
HARD_EXIT_GRACE_S = 5.0

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_STORE = 3
EXIT_INTERNAL = 10


def _require_env(name: str) -> str:
    value = os.environ.get(name)
    if value is None:
        print(f"agent: missing required environment variable {name}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)
    return value


def _wait_for_bundle(sandbox: Path, deadline: float) -> Path:
    marker = sandbox / fabric.BUNDLE_SUBDIR / fabric.STAGED_MARKER
    while time.monotonic() < deadline:
        if marker.exists():
            return sandbox / fabric.BUNDLE_SUBDIR
        time.sleep(0.05)
    raise TimeoutError(f"bundle was not staged into {sandbox} in time")


def _load_cluster_config(bundle_dir: Path) -> dict:
    path = bundle_dir / CLUSTER_CONFIG_ENTRY
    if not path.exists():
        raise FileNotFoundError(f"bundle has no {CLUSTER_CONFIG_ENTRY}")
    return json.loads(path.read_text("utf-8"))


def _run_head(
    store: FileStore,
    cluster_id: str,
    node_name: str,
    cpu_slots: int,
    cfg: dict,
    stop: threading.Event,
) -> int:
    expected_slots = int(cfg["expected_worker_slots"])
    server = HeadServer(
        cluster_id,
        token=generate_token(),
        bind_host=str(cfg.get("bind_host", "127.0.0.1")),
        expected_worker_slots=expected_slots,
    )
    address, port = server.start()
    record = HeadRecord(
        cluster_id=cluster_id,
        address=address,
        port=port,
        token=server.token,
        epoch=store.next_epoch(cluster_id),
        protocol_version=PROTOCOL_VERSION,
        created_at=int(time.time()),
    )
    store.publish_head(record)
    log.info("published head record %s:%d epoch %d", address, port, record.epoch)

    local_worker = None
    if int(cfg["n_nodes"]) == 1:
        # single-node cluster: the head node serves both roles
        local_worker = threading.Thread(
            target=WorkerAgent(record, f"{node_name}-colocated", cpu_slots).run,
            args=(stop,),
            daemon=True,
            name="colocated-worker",
        )
        local_worker.start()

    while not stop.is_set() and not server.closed.is_set():
        stop.wait(0.2)
    server.stop()
    if local_worker is not None:
        local_worker.join(timeout=2.0)
    return EXIT_OK


def _run_worker(
    store: FileStore,
    cluster_id: str,
    node_name: str,
    cpu_slots: int,
    cfg: dict,
    stop: threading.Event,
) -> int:
    record = store.discover_head(
        cluster_id,
        timeout=float(cfg.get("formation_timeout_s", 60.0)),
        poll_interval=float(cfg.get("poll_interval_s", DEFAULT_POLL_INTERVAL_S)),
    )
    WorkerAgent(record, node_name, cpu_slots).run(stop)
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    cluster_id = _require_env(fabric.ENV_CLUSTER_ID)
    node_index = int(_require_env(fabric.ENV_NODE_INDEX))
    cpu_slots = int(_require_env(fabric.ENV_CPU_SLOTS))
    sandbox = Path(_require_env(fabric.ENV_SANDBOX_DIR))
    store_root = Path(_require_env(fabric.ENV_STORE_ROOT))
    walltime_s = float(_require_env(fabric.ENV_WALLTIME_S))

    run_dir = sandbox / "run"
    run_dir.mkdir(exist_ok=True)
    logging.basicConfig(
        filename=run_dir / "agent.log",
        level=logging.INFO,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    node_name = f"node{node_index}"
    log.info("agent %s starting: cluster=%s slots=%d walltime=%.1fs",
             node_name, cluster_id, cpu_slots, walltime_s)

    stop = threading.Event()

    def _on_signal(signum, _frame):
        log.info("received signal %d, shutting down", signum)
        stop.set()

    signal.signal(signal.SIGTERM, _on_signal)
    signal.signal(signal.SIGINT, _on_signal)

    # self-enforced walltime: clean stop at expiry, hard exit shortly after;
    # both timers are daemons so a clean shutdown is never held up by them
    start = time.monotonic()
    soft = threading.Timer(walltime_s, stop.set)
    soft.daemon = True
    soft.start()
    hard = threading.Timer(
        walltime_s + HARD_EXIT_GRACE_S, os._exit, args=(EXIT_INTERNAL,)
    )
    hard.daemon = True
    hard.start()

    try:
        bundle_deadline = start + min(BUNDLE_WAIT_TIMEOUT_S, walltime_s)
        bundle_dir = _wait_for_bundle(sandbox, bundle_deadline)
        cfg = _load_cluster_config(bundle_dir)
        store = FileStore(store_root)
        if store.acquire_head_role(cluster_id, node_name):
            log.info("%s won the head election", node_name)
            return _run_head(store, cluster_id, node_name, cpu_slots, cfg, stop)
        log.info("%s joining as worker", node_name)
        return _run_worker(store, cluster_id, node_name, cpu_slots, cfg, stop)
    except (StoreUnreachable, DiscoveryTimeout) as exc:
        log.error("store/rendezvous failure: %s", exc)
        return EXIT_STORE
    except TimeoutError as exc:
        log.error("%s", exc)
        return EXIT_STORE
    except NestorError as exc:
        log.error("agent failed: %s", exc)
        return EXIT_INTERNAL
    except Exception:  # noqa: BLE001 - last-resort logging for a detached process
        log.exception("agent crashed")
        return EXIT_INTERNAL
    finally:
        stop.set()
        log.info("agent %s exiting", node_name)


if __name__ == "__main__":
    sys.exit(main(sys.argv[1:]))
