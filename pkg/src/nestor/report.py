"""Speedup and efficiency arithmetic over throughput measurements.

Given per-configuration throughput means, the report computes for every
environment and CPU count the ideal speedup (linear extrapolation of the
base configuration by the worker-CPU ratio), the actual speedup (mean
divided by base mean), and the efficiency percentage (actual over ideal,
capped at 100). Ratios are carried unrounded; rounding to integers
happens only when rendering, using round-half-up.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from . import bench
from .errors import EmptyInput, InconsistentUnits, MissingBase, ZeroBase

MEASUREMENT_HEADER = ("env", "total_cpus", "mean", "stddev")
REPORT_HEADER = ("env", "total_cpus", "mean", "stddev", "ideal_factor",
                 "actual_factor", "efficiency_pct")
SERIES_HEADER = ("env", "cpus", "ideal", "mean", "lo_2sigma", "hi_2sigma")

PAPER_FIXTURE_NAME = "appendix_throughput.csv"


def round_half_up(x: float) -> int:
    """Nearest integer, .5 away from zero for the non-negative inputs here."""
    return math.floor(x + 0.5)


def speedup(mean: float, base_mean: float) -> float:
    """Actual speedup factor: mean / base_mean, as an exact ratio."""
    if base_mean <= 0:
        raise ZeroBase(f"base mean must be positive, got {base_mean}")
    return mean / base_mean


def efficiency(actual_factor: float, ideal_factor: float) -> int:
    """Percent of ideal achieved, rounded half-up and capped at 100."""
    if ideal_factor <= 0:
        raise ValueError(f"ideal_factor must be positive, got {ideal_factor}")
    return min(100, round_half_up(100.0 * actual_factor / ideal_factor))


@dataclass(frozen=True)
class Measurement:
    """Aggregated throughput of one (env, cpus) configuration."""

    env_name: str
    total_cpus: int
    mean: float
    stddev: float


@dataclass(frozen=True)
class ScalingEntry:
    env_name: str
    total_cpus: int
    mean_throughput: float
    stddev_throughput: float
    ideal_factor: float
    actual_factor: float
    efficiency_pct: int


@dataclass(frozen=True)
class ScalingReport:
    base_cpus: int
    entries: tuple[ScalingEntry, ...]
    provenance: Mapping[str, str]

    def envs(self) -> list[str]:
        seen = []
        for e in self.entries:
            if e.env_name not in seen:
                seen.append(e.env_name)
        return seen

    def cpu_columns(self) -> list[int]:
        return sorted({e.total_cpus for e in self.entries})

    def env_entries(self, env_name: str) -> list[ScalingEntry]:
        return [e for e in self.entries if e.env_name == env_name]


def measurements_from_records(
    records: Iterable[bench.BenchRecord],
) -> list[Measurement]:
    """Aggregate raw per-repetition records into per-configuration rows."""
    groups: dict[tuple[str, int], list[bench.BenchRecord]] = {}
    for record in records:
        groups.setdefault((record.env_name, record.total_cpu_workers), []).append(record)
    out = []
    for (env_name, cpus), group in sorted(groups.items()):
        mean, stddev = bench.aggregate(group)
        out.append(Measurement(env_name=env_name, total_cpus=cpus,
                               mean=mean, stddev=stddev))
    return out


def read_measurements_csv(path: os.PathLike | str) -> list[Measurement]:
    """Read either raw bench records or pre-aggregated measurement rows."""
    text = Path(path).read_text("utf-8")
    reader = csv.reader(io.StringIO(text))
    rows = [row for row in reader if row]
    if not rows:
        raise EmptyInput(f"{path}: no rows")
    header = tuple(rows[0])
    if header == bench.CSV_HEADER:
        return measurements_from_records(bench.records_from_csv(text))
    if header == MEASUREMENT_HEADER:
        out = []
        for row in rows[1:]:
            out.append(Measurement(env_name=row[0], total_cpus=int(row[1]),
                                   mean=float(row[2]), stddev=float(row[3])))
        if not out:
            raise EmptyInput(f"{path}: header only")
        return out
    raise InconsistentUnits(f"{path}: unrecognized header {header}")


def build_report(
    measurements: Sequence[Measurement] | Sequence[bench.BenchRecord],
    base_cpus: int,
    provenance: Mapping[str, str] | None = None,
) -> ScalingReport:
    """Compute ideal/actual/efficiency for every (env, cpus) configuration."""
    if not measurements:
        raise EmptyInput("no measurements")
    if base_cpus < 1:
        raise ValueError("base_cpus must be >= 1")
    if isinstance(measurements[0], bench.BenchRecord):
        measurements = measurements_from_records(measurements)
    if not all(isinstance(m, Measurement) for m in measurements):
        raise InconsistentUnits("measurement rows mix types")

    by_env: dict[str, dict[int, Measurement]] = {}
    for m in measurements:
        env_group = by_env.setdefault(m.env_name, {})
        if m.total_cpus in env_group:
            raise InconsistentUnits(
                f"duplicate configuration ({m.env_name!r}, {m.total_cpus})"
            )
        env_group[m.total_cpus] = m

    entries: list[ScalingEntry] = []
    for env_name in sorted(by_env):
        env_group = by_env[env_name]
        if base_cpus not in env_group:
            raise MissingBase(env_name, base_cpus)
        base_mean = env_group[base_cpus].mean
        for cpus in sorted(env_group):
            m = env_group[cpus]
            if cpus == base_cpus:
                ideal, actual, eff = 1.0, 1.0, 100
            else:
                ideal = cpus / base_cpus
                actual = speedup(m.mean, base_mean)
                eff = efficiency(actual, ideal)
            entries.append(ScalingEntry(
                env_name=env_name,
                total_cpus=cpus,
                mean_throughput=m.mean,
                stddev_throughput=m.stddev,
                ideal_factor=ideal,
                actual_factor=actual,
                efficiency_pct=eff,
            ))
    return ScalingReport(base_cpus=base_cpus, entries=tuple(entries),
                         provenance=dict(provenance or {}))


# --- rendering -------------------------------------------------------------


def _text_table(report: ScalingReport, cell) -> str:
    cpus_cols = report.cpu_columns()
    env_width = max([len("Environment")] + [len(e) for e in report.envs()])
    lines = []
    header = "Environment".ljust(env_width) + "".join(
        f"{c:>8}" for c in cpus_cols
    )
    lines.append(header)
    for env_name in report.envs():
        row = {e.total_cpus: e for e in report.env_entries(env_name)}
        cells = "".join(
            f"{cell(row[c]) if c in row else '-':>8}" for c in cpus_cols
        )
        lines.append(env_name.ljust(env_width) + cells)
    return "\n".join(lines)


def emit_table(report: ScalingReport, format: str = "text") -> bytes:
    """Render the report; text mirrors the two published table layouts."""
    if format == "text":
        speedups = _text_table(
            report, lambda e: f"{round_half_up(e.actual_factor)}x"
        )
        efficiencies = _text_table(report, lambda e: str(e.efficiency_pct))
        text = (
            "Throughput Speedup Factors\n"
            f"{speedups}\n\n"
            "Throughput Efficiency (%)\n"
            f"{efficiencies}\n"
        )
        return text.encode("utf-8")
    if format == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(REPORT_HEADER)
        for e in report.entries:
            writer.writerow([
                e.env_name, e.total_cpus, repr(e.mean_throughput),
                repr(e.stddev_throughput), repr(e.ideal_factor),
                repr(e.actual_factor), e.efficiency_pct,
            ])
        return buf.getvalue().encode("utf-8")
    if format == "json":
        obj = {
            "base_cpus": report.base_cpus,
            "provenance": dict(report.provenance),
            "entries": [
                {
                    "env": e.env_name,
                    "total_cpus": e.total_cpus,
                    "mean": e.mean_throughput,
                    "stddev": e.stddev_throughput,
                    "ideal_factor": e.ideal_factor,
                    "actual_factor": e.actual_factor,
                    "efficiency_pct": e.efficiency_pct,
                }
                for e in report.entries
            ],
        }
        return json.dumps(obj, indent=2).encode("utf-8")
    raise ValueError(f"unknown format {format!r}")


def parse_report_json(data: bytes) -> ScalingReport:
    obj = json.loads(data.decode("utf-8"))
    entries = tuple(
        ScalingEntry(
            env_name=e["env"],
            total_cpus=int(e["total_cpus"]),
            mean_throughput=float(e["mean"]),
            stddev_throughput=float(e["stddev"]),
            ideal_factor=float(e["ideal_factor"]),
            actual_factor=float(e["actual_factor"]),
            efficiency_pct=int(e["efficiency_pct"]),
        )
        for e in obj["entries"]
    )
    return ScalingReport(base_cpus=int(obj["base_cpus"]), entries=entries,
                         provenance=dict(obj.get("provenance", {})))


def emit_scaling_series(report: ScalingReport) -> bytes:
    """Per-env series for line plots: ideal extrapolation and 2-sigma band."""
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(SERIES_HEADER)
    for env_name in report.envs():
        entries = report.env_entries(env_name)
        base = next(e for e in entries if e.total_cpus == report.base_cpus)
        for e in sorted(entries, key=lambda e: e.total_cpus):
            ideal = base.mean_throughput * e.total_cpus / report.base_cpus
            lo = e.mean_throughput - 2.0 * e.stddev_throughput
            hi = e.mean_throughput + 2.0 * e.stddev_throughput
            writer.writerow([
                env_name, e.total_cpus, repr(ideal),
                repr(e.mean_throughput), repr(lo), repr(hi),
            ])
    return buf.getvalue().encode("utf-8")


# --- published reference data ------------------------------------------------


def paper_fixture_path() -> Path:
    """The transcribed published per-configuration means and deviations."""
    return Path(str(resources.files("nestor").joinpath("data", PAPER_FIXTURE_NAME)))


def file_digest(path: os.PathLike | str) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
