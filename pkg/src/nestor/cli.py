"""Operator command line: cluster lifecycle, jobs, benchmarks, reports.

Exit codes: 0 ok, 2 usage/input error, 3 store error, 4 state conflict,
5 data error, 10 internal failure.
"""
from __future__ import annotations

import argparse
import base64
import json
import os
import shutil
import signal
import sys
import time
from pathlib import Path

from . import bench, orchestrator, report
from .errors import (
    ClusterExists,
    ClusterNotReady,
    DiscoveryTimeout,
    EmptyInput,
    InconsistentUnits,
    MissingBase,
    NestorError,
    StoreUnreachable,
    WorkloadFailed,
)
from .rendezvous import FileStore
from .scheduler.client import ClusterClient
from .scheduler.types import JobSpec

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_STORE = 3
EXIT_STATE = 4
EXIT_DATA = 5
EXIT_INTERNAL = 10

_ERROR_EXITS = (
    ((StoreUnreachable, DiscoveryTimeout), EXIT_STORE),
    ((ClusterExists, ClusterNotReady), EXIT_STATE),
    ((MissingBase, EmptyInput, InconsistentUnits, WorkloadFailed), EXIT_DATA),
    ((ValueError, FileNotFoundError, json.JSONDecodeError, KeyError), EXIT_USAGE),
)


def _exit_for(exc: BaseException) -> int:
    for types, code in _ERROR_EXITS:
        if isinstance(exc, types):
            return code
    return EXIT_INTERNAL


def _fail(exc: BaseException) -> int:
    print(f"error: {exc}", file=sys.stderr)
    return _exit_for(exc)


# --- up / down / status / submit ------------------------------------------------


def cmd_up(args) -> int:
    config = orchestrator.ClusterConfig.from_file(args.config)
    if args.cluster_id:
        config.cluster_id = args.cluster_id
    handle = orchestrator.up(config)
    orchestrator.write_handle_file(handle)
    summary = handle.summary()
    print(f"cluster {summary['cluster_id']} is {summary['phase']}")
    print(f"  head       {summary['head']['address']}:{summary['head']['port']}"
          f" (epoch {summary['head']['epoch']})")
    print(f"  workers    {summary['workers']}")
    print(f"  slots      {summary['worker_slots']}")
    print(f"  agent pids {' '.join(str(p) for p in summary['pids'])}")
    return EXIT_OK


def _load_cluster(args) -> tuple[FileStore, str]:
    store_root = Path(args.store_root)
    return FileStore(store_root), args.cluster_id


def cmd_down(args) -> int:
    store, cluster_id = _load_cluster(args)
    handle_data = orchestrator.read_handle_file(store.root, cluster_id)
    record = None
    try:
        record = store.read_head(cluster_id)
    except NestorError:
        pass
    if handle_data is None and record is None:
        print(f"cluster {cluster_id} is already down")
        return EXIT_OK
    if record is not None:
        try:
            with ClusterClient.connect(record, timeout=3.0) as client:
                client.shutdown_cluster()
        except NestorError:
            pass
    pids = (handle_data or {}).get("pids", [])
    deadline = time.monotonic() + 6.0
    while time.monotonic() < deadline and any(_pid_alive(p) for p in pids):
        time.sleep(0.1)
    for pid in pids:
        if _pid_alive(pid):
            _kill_pid(pid)
    retain = bool((handle_data or {}).get("retain_sandbox", False))
    sandbox_root = (handle_data or {}).get("sandbox_root")
    if sandbox_root and not retain:
        shutil.rmtree(sandbox_root, ignore_errors=True)
    store.clear_cluster(cluster_id)
    orchestrator.remove_handle_file(store.root, cluster_id)
    print(f"cluster {cluster_id} is down")
    return EXIT_OK


def _pid_alive(pid: int) -> bool:
    try:
        os.kill(pid, 0)
        return True
    except (ProcessLookupError, PermissionError):
        return False


def _kill_pid(pid: int) -> None:
    for sig in (signal.SIGTERM, signal.SIGKILL):
        try:
            os.killpg(pid, sig)
        except (ProcessLookupError, PermissionError):
            try:
                os.kill(pid, sig)
            except (ProcessLookupError, PermissionError):
                return
        time.sleep(0.2)


def cmd_status(args) -> int:
    store, cluster_id = _load_cluster(args)
    record = store.read_head(cluster_id)
    if record is None:
        print(f"no cluster {cluster_id!r} in store {store.root}", file=sys.stderr)
        return EXIT_STATE
    try:
        with ClusterClient.connect(record, timeout=3.0) as client:
            info = client.cluster_info()
    except NestorError as exc:
        print(f"cluster {cluster_id}: head record found but unreachable ({exc})",
              file=sys.stderr)
        return EXIT_STATE
    phase = "Ready" if info["formed"] else "Forming"
    print(f"cluster {cluster_id} phase {phase}")
    print(f"  head {record.address}:{record.port} epoch {record.epoch}")
    print(f"  worker slots {info['worker_slot_total']}"
          f"/{info['expected_worker_slots']}")
    print(f"  {'id':>4} {'node':<12} {'slots':>5} {'free':>5} connected")
    for w in info["workers"]:
        print(f"  {w['worker_id']:>4} {w['node_name']:<12} "
              f"{w['cpu_slots_total']:>5} {w['cpu_slots_free']:>5} "
              f"{w['connected']}")
    return EXIT_OK


def cmd_submit(args) -> int:
    store, cluster_id = _load_cluster(args)
    record = store.read_head(cluster_id)
    if record is None:
        print(f"no cluster {cluster_id!r} in store {store.root}", file=sys.stderr)
        return EXIT_STATE
    payload = json.loads(Path(args.jobfile).read_text("utf-8"))
    if isinstance(payload, list):
        payload = {"jobs": payload}
    job_specs = [JobSpec.from_wire(obj) for obj in payload.get("jobs", [])]
    if not job_specs:
        raise ValueError(f"{args.jobfile}: no jobs")
    with ClusterClient.connect(record) as client:
        for artifact_id, b64 in sorted((payload.get("externals") or {}).items()):
            client.put_artifact(artifact_id, base64.b64decode(b64))
        job_ids = [client.submit(spec) for spec in job_specs]
        statuses = client.wait(job_ids, timeout=args.timeout)
    failed = 0
    for job_id in job_ids:
        status = statuses[job_id]
        line = f"{job_id}: {status.phase.value}"
        if status.error:
            line += f" ({status.error})"
            failed += 1
        print(line)
    if failed:
        print(f"{failed}/{len(job_ids)} jobs failed", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


# --- bench / report ---------------------------------------------------------------


def cmd_bench(args) -> int:
    preset = bench.get_preset(args.preset)  # ValueError -> usage exit
    ladder = [int(x) for x in args.ladder.split(",") if x]
    if not ladder or any(k < 1 for k in ladder):
        raise ValueError(f"bad ladder {args.ladder!r}")
    if any(k % args.cpus_per_node for k in ladder):
        raise ValueError("every ladder entry must divide by --cpus-per-node")
    base_config = orchestrator.ClusterConfig.from_file(args.config)

    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    if not out_path.exists():
        out_path.write_text(",".join(bench.CSV_HEADER) + "\n", "utf-8")

    for slots in ladder:
        config = orchestrator.ClusterConfig(
            cluster_id=f"{base_config.cluster_id}-w{slots}",
            n_nodes=slots // args.cpus_per_node + 1,
            cpus_per_node=args.cpus_per_node,
            walltime_s=base_config.walltime_s,
            store_root=base_config.store_root,
            bundle=base_config.bundle,
            retain_sandbox=base_config.retain_sandbox,
            formation_timeout_s=base_config.formation_timeout_s,
        )
        spec = bench.BenchRunSpec.from_preset(
            preset, total_cpu_workers=slots,
            samples_per_worker=args.samples_per_worker, repetitions=args.reps,
        )
        print(f"benchmarking {preset.name} on {slots} worker slots "
              f"({config.n_nodes} nodes)...")
        handle = orchestrator.up(config)
        try:
            records = bench.run_benchmark(handle, spec)
        finally:
            orchestrator.down(handle)
        rows = bench.records_to_csv(records).splitlines()[1:]
        with open(out_path, "a", encoding="utf-8") as fh:
            fh.write("\n".join(rows) + "\n")
        for r in records:
            print(f"  rep {r.repetition_index}: {r.samples_collected} samples "
                  f"in {r.wall_seconds:.3f}s -> {r.throughput:.1f}/s")
    print(f"wrote {out_path}")
    return EXIT_OK


def cmd_report(args) -> int:
    if args.paper_fixture:
        input_path = report.paper_fixture_path()
    elif args.input:
        input_path = Path(args.input)
    else:
        raise ValueError("either --input or --paper-fixture is required")
    measurements = report.read_measurements_csv(input_path)
    scaling = report.build_report(
        measurements,
        base_cpus=args.base_cpus,
        provenance={"source": str(input_path),
                    "sha256": report.file_digest(input_path)},
    )
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.csv").write_bytes(report.emit_table(scaling, "csv"))
    (out_dir / "report.json").write_bytes(report.emit_table(scaling, "json"))
    (out_dir / "series.csv").write_bytes(report.emit_scaling_series(scaling))
    sys.stdout.write(report.emit_table(scaling, "text").decode("utf-8"))
    print(f"\nwrote {out_dir / 'report.csv'}, {out_dir / 'report.json'}, "
          f"{out_dir / 'series.csv'}")
    return EXIT_OK


# --- argument parsing ---------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nestor",
        description="bootstrap a head-worker cluster on a simulated node "
                    "fabric, run jobs and throughput benchmarks",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_up = sub.add_parser("up", help="bring a cluster to Ready")
    p_up.add_argument("--config", required=True, help="cluster config JSON")
    p_up.add_argument("--cluster-id", help="override the config's cluster_id")
    p_up.set_defaults(fn=cmd_up)

    for name, fn, help_text in (
        ("down", cmd_down, "shut a cluster down"),
        ("status", cmd_status, "show cluster phase and workers"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--cluster-id", required=True)
        p.add_argument("--store-root", required=True)
        p.set_defaults(fn=fn)

    p_submit = sub.add_parser("submit", help="submit a jobfile and wait")
    p_submit.add_argument("--cluster-id", required=True)
    p_submit.add_argument("--store-root", required=True)
    p_submit.add_argument("--timeout", type=float, default=300.0)
    p_submit.add_argument("jobfile", help="JSON array of job objects")
    p_submit.set_defaults(fn=cmd_submit)

    p_bench = sub.add_parser("bench", help="run the throughput ladder")
    p_bench.add_argument("--config", required=True, help="base cluster config JSON")
    p_bench.add_argument("--preset", required=True,
                         help=f"one of {sorted(bench.PRESETS)}")
    p_bench.add_argument("--ladder", required=True,
                         help="comma-separated worker slot totals, e.g. 2,4,8")
    p_bench.add_argument("--reps", type=int, default=bench.DEFAULT_REPETITIONS)
    p_bench.add_argument("--samples-per-worker", type=int,
                         default=bench.DEFAULT_SAMPLES_PER_WORKER)
    p_bench.add_argument("--cpus-per-node", type=int, default=1)
    p_bench.add_argument("--out", required=True, help="bench CSV output path")
    p_bench.set_defaults(fn=cmd_bench)

    p_report = sub.add_parser("report", help="compute speedup/efficiency tables")
    p_report.add_argument("--input", help="bench CSV (raw records or aggregated)")
    p_report.add_argument("--paper-fixture", action="store_true",
                          help="use the packaged published measurements")
    p_report.add_argument("--base-cpus", type=int, default=28)
    p_report.add_argument("--out-dir", default=".")
    p_report.set_defaults(fn=cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors, which matches our exit map
        return int(exc.code or 0)
    try:
        return args.fn(args)
    except NestorError as exc:
        return _fail(exc)
    except (ValueError, FileNotFoundError, json.JSONDecodeError, KeyError) as exc:
        return _fail(exc)
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
