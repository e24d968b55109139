"""Throughput benchmarks: one actor per worker CPU slot.

Each actor steps a synthetic environment through a fixed per-slot sample
budget (default 1000 state-action interactions per slot, so total samples
scale with the slot count). A step costs exactly one dense matvec of
matvec_dim^2 multiply-adds plus a busy-wait of extra_busy_us, and may
carry a per-step payload back to the head to model communication-bound
workloads. Wall clock is measured at the head, from the dispatch of the
first actor task to the receipt of the last result, so communication cost
is part of every measurement.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import statistics
import time
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import ActorFailed, EmptyInput, SlotMismatch
from .orchestrator import ClusterHandle
from .scheduler.types import JobPhase, JobSpec

DEFAULT_SAMPLES_PER_WORKER = 1000
DEFAULT_REPETITIONS = 4

CSV_HEADER = ("env", "total_cpus", "rep", "samples", "wall_s", "throughput")


@dataclass(frozen=True)
class StepCostModel:
    """Per-step compute and communication cost of a synthetic environment."""

    matvec_dim: int
    extra_busy_us: int = 0
    payload_bytes_per_step: int = 0

    def validate(self) -> None:
        if self.matvec_dim < 1:
            raise ValueError("matvec_dim must be >= 1")
        if self.extra_busy_us < 0 or self.payload_bytes_per_step < 0:
            raise ValueError("cost fields must be non-negative")


def busy_wait(microseconds: int) -> None:
    """Burn CPU for the given duration; never sleeps."""
    if microseconds <= 0:
        return
    end = time.perf_counter_ns() + microseconds * 1000
    while time.perf_counter_ns() < end:
        pass


class SyntheticEnv:
    """Deterministic stand-in for a physics environment plus policy network.

    The policy is a single dense matvec; the recurrence x' = tanh(W x)
    keeps the state bounded, so trajectories are reproducible bit-for-bit
    for a given seed regardless of where the actor runs.
    """

    def __init__(
        self,
        env_name: str,
        state_dim: int,
        action_dim: int,
        step_cost_model: StepCostModel,
        seed: int,
    ):
        step_cost_model.validate()
        if state_dim < 1 or action_dim < 1:
            raise ValueError("state_dim and action_dim must be >= 1")
        if max(state_dim, action_dim) > step_cost_model.matvec_dim:
            raise ValueError("matvec_dim must cover state_dim and action_dim")
        self.env_name = env_name
        self.state_dim = state_dim
        self.action_dim = action_dim
        self.step_cost_model = step_cost_model
        self.seed = seed
        self.steps_taken = 0
        self._w: np.ndarray
        self._x: np.ndarray
        self.reset()

    def reset(self) -> np.ndarray:
        rng = np.random.default_rng(self.seed)
        dim = self.step_cost_model.matvec_dim
        self._w = rng.standard_normal((dim, dim)) / np.sqrt(dim)
        self._x = rng.standard_normal(dim)
        self.steps_taken = 0
        return self.observation()

    def observation(self) -> np.ndarray:
        return self._x[: self.state_dim].copy()

    def step(self) -> tuple[np.ndarray, np.ndarray]:
        """One state-action interaction; returns (observation, action)."""
        y = self._w @ self._x
        action = np.tanh(y[: self.action_dim])
        busy_wait(self.step_cost_model.extra_busy_us)
        self._x = np.tanh(y)
        self.steps_taken += 1
        return self.observation(), action

    def checksum(self) -> str:
        return hashlib.sha256(self._x.tobytes()).hexdigest()


@dataclass(frozen=True)
class RolloutResult:
    samples: int
    elapsed_s: float
    checksum: str


def actor_rollout(env: SyntheticEnv, n_steps: int) -> RolloutResult:
    """Execute exactly n_steps interactions and time them."""
    if n_steps < 0:
        raise ValueError("n_steps must be >= 0")
    t0 = time.perf_counter()
    for _ in range(n_steps):
        env.step()
    elapsed = time.perf_counter() - t0
    return RolloutResult(samples=n_steps, elapsed_s=elapsed, checksum=env.checksum())


# --- presets -------------------------------------------------------------------


@dataclass(frozen=True)
class BenchPreset:
    """A named environment stand-in mapped to a cost tier."""

    name: str
    env_name: str
    state_dim: int
    action_dim: int
    cost: StepCostModel


PRESETS: dict[str, BenchPreset] = {
    # compute-heavy: cheap observation, step dominated by on-CPU busy work
    "pendulum_like": BenchPreset(
        name="pendulum_like",
        env_name="pendulum_like",
        state_dim=3,
        action_dim=1,
        cost=StepCostModel(matvec_dim=64, extra_busy_us=1500),
    ),
    # communication-heavy: every step ships a large observation payload back
    # to the head, reproducing the efficiency collapse of big-state envs
    "humanoid_like": BenchPreset(
        name="humanoid_like",
        env_name="humanoid_like",
        state_dim=376,
        action_dim=17,
        cost=StepCostModel(matvec_dim=384, extra_busy_us=200,
                           payload_bytes_per_step=4096),
    ),
    # near-zero step cost, for fast accounting tests
    "tiny": BenchPreset(
        name="tiny",
        env_name="tiny",
        state_dim=4,
        action_dim=2,
        cost=StepCostModel(matvec_dim=16),
    ),
}


def get_preset(name: str) -> BenchPreset:
    try:
        return PRESETS[name]
    except KeyError:
        raise ValueError(
            f"unknown preset {name!r}; known: {sorted(PRESETS)}"
        ) from None


# --- distributed actor task -----------------------------------------------------


def rollout_task_body(ctx) -> None:
    """Task body behind the 'rollout' kind (runs on workers).

    params: env_name, state_dim, action_dim, matvec_dim, extra_busy_us,
    payload_bytes_per_step, n_steps, seed, artifact. The produced artifact
    is a JSON metrics line, then a newline, then the raw payload bytes.
    """
    p = ctx.params
    cost = StepCostModel(
        matvec_dim=int(p["matvec_dim"]),
        extra_busy_us=int(p.get("extra_busy_us", 0)),
        payload_bytes_per_step=int(p.get("payload_bytes_per_step", 0)),
    )
    env = SyntheticEnv(
        env_name=str(p["env_name"]),
        state_dim=int(p["state_dim"]),
        action_dim=int(p["action_dim"]),
        step_cost_model=cost,
        seed=int(p["seed"]),
    )
    n_steps = int(p["n_steps"])
    result = actor_rollout(env, n_steps)
    payload = b""
    if cost.payload_bytes_per_step > 0:
        rng = np.random.default_rng(env.seed ^ 0x5EED)
        payload = rng.bytes(cost.payload_bytes_per_step * n_steps)
    metrics = {
        "samples": result.samples,
        "elapsed_s": result.elapsed_s,
        "checksum": result.checksum,
        "payload_size": len(payload),
    }
    ctx.put(str(p["artifact"]),
            json.dumps(metrics).encode("utf-8") + b"\n" + payload)


def parse_rollout_artifact(data: bytes) -> dict:
    head, _, payload = data.partition(b"\n")
    metrics = json.loads(head.decode("utf-8"))
    metrics["payload"] = payload
    return metrics


# --- benchmark harness -----------------------------------------------------------


@dataclass(frozen=True)
class BenchRunSpec:
    env_name: str
    total_cpu_workers: int
    cost: StepCostModel
    state_dim: int = 8
    action_dim: int = 2
    samples_per_worker: int = DEFAULT_SAMPLES_PER_WORKER
    repetitions: int = DEFAULT_REPETITIONS
    base_seed: int = 1234

    def validate(self) -> None:
        self.cost.validate()
        if self.total_cpu_workers < 1:
            raise ValueError("total_cpu_workers must be >= 1")
        if self.samples_per_worker < 0:
            raise ValueError("samples_per_worker must be >= 0")
        if self.repetitions < 1:
            raise ValueError("repetitions must be >= 1")

    @property
    def total_samples(self) -> int:
        return self.samples_per_worker * self.total_cpu_workers

    @classmethod
    def from_preset(cls, preset: BenchPreset, total_cpu_workers: int,
                    samples_per_worker: int = DEFAULT_SAMPLES_PER_WORKER,
                    repetitions: int = DEFAULT_REPETITIONS) -> "BenchRunSpec":
        return cls(
            env_name=preset.env_name,
            total_cpu_workers=total_cpu_workers,
            cost=preset.cost,
            state_dim=preset.state_dim,
            action_dim=preset.action_dim,
            samples_per_worker=samples_per_worker,
            repetitions=repetitions,
        )


@dataclass(frozen=True)
class BenchRecord:
    env_name: str
    total_cpu_workers: int
    repetition_index: int
    samples_collected: int
    wall_seconds: float
    throughput: float


def run_benchmark(handle: ClusterHandle, spec: BenchRunSpec,
                  timeout_per_rep_s: float = 600.0) -> list[BenchRecord]:
    """One actor job per worker CPU slot, repeated spec.repetitions times."""
    spec.validate()
    records: list[BenchRecord] = []
    with handle.client() as client:
        info = client.cluster_info()
        slots = info["worker_slot_total"]
        if slots != spec.total_cpu_workers:
            raise SlotMismatch(
                f"cluster has {slots} worker slots, spec wants "
                f"{spec.total_cpu_workers}"
            )
        for rep in range(spec.repetitions):
            job_ids = []
            artifact_ids = []
            for actor in range(spec.total_cpu_workers):
                job_id = f"bench.{spec.env_name}.r{rep}.a{actor}"
                artifact_id = f"{job_id}.out"
                params = {
                    "env_name": spec.env_name,
                    "state_dim": spec.state_dim,
                    "action_dim": spec.action_dim,
                    "matvec_dim": spec.cost.matvec_dim,
                    "extra_busy_us": spec.cost.extra_busy_us,
                    "payload_bytes_per_step": spec.cost.payload_bytes_per_step,
                    "n_steps": spec.samples_per_worker,
                    "seed": spec.base_seed + rep * 100003 + actor,
                    "artifact": artifact_id,
                }
                client.submit(JobSpec(
                    job_id=job_id,
                    task_kind="rollout",
                    params=params,
                    cpu_req=1,
                    produces=frozenset({artifact_id}),
                ))
                job_ids.append(job_id)
                artifact_ids.append(artifact_id)
            statuses = client.wait(job_ids, timeout=timeout_per_rep_s)
            for job_id, status in statuses.items():
                if status.phase is JobPhase.FAILED:
                    raise ActorFailed(f"{job_id}: {status.error}")
            dispatched = [s.t_dispatched for s in statuses.values()]
            finished = [s.t_finished for s in statuses.values()]
            wall = max(finished) - min(dispatched)
            samples = 0
            for artifact_id in artifact_ids:
                metrics = parse_rollout_artifact(client.get_artifact(artifact_id))
                samples += int(metrics["samples"])
            records.append(BenchRecord(
                env_name=spec.env_name,
                total_cpu_workers=spec.total_cpu_workers,
                repetition_index=rep,
                samples_collected=samples,
                wall_seconds=wall,
                throughput=samples / wall if wall > 0 else float("inf"),
            ))
    return records


def aggregate(records: Sequence[BenchRecord]) -> tuple[float, float]:
    """Arithmetic mean and sample standard deviation of throughput."""
    if not records:
        raise EmptyInput("no records to aggregate")
    keys = {(r.env_name, r.total_cpu_workers) for r in records}
    if len(keys) != 1:
        raise ValueError(f"records mix configurations: {sorted(keys)}")
    values = [r.throughput for r in records]
    mean = statistics.fmean(values)
    stddev = statistics.stdev(values) if len(values) > 1 else 0.0
    return mean, stddev


# --- record serialization ----------------------------------------------------------


def records_to_csv(records: Iterable[BenchRecord]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(CSV_HEADER)
    for r in records:
        writer.writerow([
            r.env_name, r.total_cpu_workers, r.repetition_index,
            r.samples_collected, repr(r.wall_seconds), repr(r.throughput),
        ])
    return buf.getvalue()


def records_from_csv(text: str) -> list[BenchRecord]:
    reader = csv.reader(io.StringIO(text))
    rows = list(reader)
    if not rows or tuple(rows[0]) != CSV_HEADER:
        raise ValueError(f"expected header {','.join(CSV_HEADER)}")
    out = []
    for row in rows[1:]:
        if not row:
            continue
        out.append(BenchRecord(
            env_name=row[0],
            total_cpu_workers=int(row[1]),
            repetition_index=int(row[2]),
            samples_collected=int(row[3]),
            wall_seconds=float(row[4]),
            throughput=float(row[5]),
        ))
    return out


def records_to_json(records: Iterable[BenchRecord]) -> str:
    return json.dumps([
        {
            "env": r.env_name,
            "total_cpus": r.total_cpu_workers,
            "rep": r.repetition_index,
            "samples": r.samples_collected,
            "wall_s": r.wall_seconds,
            "throughput": r.throughput,
        }
        for r in records
    ], indent=2)
