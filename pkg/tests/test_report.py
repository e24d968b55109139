"""Speedup/efficiency arithmetic and rendering tests.

Expected values in the anchor tests are the published cells for the
corresponding throughput means; derived values (ideal extrapolations,
bands) were hand-computed from the same means.
"""
from __future__ import annotations

import math

import pytest
from hypothesis import assume, given, settings, strategies as st

from nestor import bench, report
from nestor.errors import EmptyInput, InconsistentUnits, MissingBase, ZeroBase
from nestor.report import (
    Measurement,
    build_report,
    efficiency,
    emit_scaling_series,
    emit_table,
    parse_report_json,
    round_half_up,
    speedup,
)


def m(env, cpus, mean, stddev=0.0):
    return Measurement(env_name=env, total_cpus=cpus, mean=mean, stddev=stddev)


# --- speedup ------------------------------------------------------------------


def test_speedup_acrobot_top_config():
    factor = speedup(99540, 5656)
    assert math.isclose(factor, 17.599009900990097)
    assert round_half_up(factor) == 18


def test_speedup_base_against_itself():
    factor = speedup(5656, 5656)
    assert factor == 1.0
    assert round_half_up(factor) == 1


def test_speedup_humanoid_top_config():
    factor = speedup(11969, 4108)
    assert math.isclose(factor, 2.913583252190847)
    assert round_half_up(factor) == 3


def test_speedup_zero_base():
    with pytest.raises(ZeroBase):
        speedup(100, 0)


# --- efficiency ------------------------------------------------------------------


def test_efficiency_acrobot_868():
    assert efficiency(speedup(99540, 5656), 31) == 57


def test_efficiency_caps_at_100():
    # measured above ideal due to variance is capped
    assert efficiency(3.070398, 3) == 100
    assert efficiency(speedup(18100, 5895), 3) == 100


def test_efficiency_humanoid_868():
    assert efficiency(2.913583252190847, 31) == 9


def test_efficiency_invalid_ideal():
    with pytest.raises(ValueError):
        efficiency(1.0, 0)


# --- build_report ------------------------------------------------------------------


ACROBOT = [
    m("Acrobot", 28, 5656, 1063), m("Acrobot", 84, 17391, 1350),
    m("Acrobot", 196, 35370, 1008), m("Acrobot", 420, 62134, 3070),
    m("Acrobot", 868, 99540, 2402),
]


def test_build_report_acrobot_row():
    scaling = build_report(ACROBOT, base_cpus=28)
    speedups = [round_half_up(e.actual_factor) for e in scaling.entries]
    efficiencies = [e.efficiency_pct for e in scaling.entries]
    assert speedups == [1, 3, 6, 11, 18]
    assert efficiencies == [100, 100, 89, 73, 57]
    assert [e.ideal_factor for e in scaling.entries] == [1.0, 3.0, 7.0, 15.0, 31.0]


def test_build_report_ant_row():
    ant = [
        m("Ant", 28, 5106), m("Ant", 84, 13492), m("Ant", 196, 26650),
        m("Ant", 420, 39468), m("Ant", 868, 55055),
    ]
    scaling = build_report(ant, base_cpus=28)
    assert [e.efficiency_pct for e in scaling.entries] == [100, 88, 75, 52, 35]


def test_build_report_single_base_entry():
    scaling = build_report([m("Solo", 28, 5000, 100)], base_cpus=28)
    entry = scaling.entries[0]
    assert entry.ideal_factor == entry.actual_factor == 1.0
    assert entry.efficiency_pct == 100


def test_build_report_from_raw_records():
    records = [
        bench.BenchRecord("e", 4, i, 4000, 1.0, t)
        for i, t in enumerate([90.0, 110.0])
    ] + [
        bench.BenchRecord("e", 8, i, 8000, 1.0, t)
        for i, t in enumerate([150.0, 150.0])
    ]
    scaling = build_report(records, base_cpus=4)
    by_cpus = {e.total_cpus: e for e in scaling.entries}
    assert by_cpus[4].mean_throughput == 100.0
    assert math.isclose(by_cpus[4].stddev_throughput, 14.142135623730951)
    assert by_cpus[8].actual_factor == 1.5
    assert by_cpus[8].efficiency_pct == 75


def test_build_report_missing_base():
    with pytest.raises(MissingBase):
        build_report([m("NoBase", 84, 1000)], base_cpus=28)


def test_build_report_duplicate_config():
    with pytest.raises(InconsistentUnits):
        build_report([m("E", 28, 1), m("E", 28, 2)], base_cpus=28)


def test_build_report_empty():
    with pytest.raises(EmptyInput):
        build_report([], base_cpus=28)


# --- rendering -------------------------------------------------------------------------


def test_text_table_acrobot_row():
    scaling = build_report(ACROBOT, base_cpus=28)
    text = emit_table(scaling, "text").decode("utf-8")
    row = next(line for line in text.splitlines() if line.startswith("Acrobot"))
    assert row.split()[1:] == ["1x", "3x", "6x", "11x", "18x"]
    eff_rows = [line for line in text.splitlines() if line.startswith("Acrobot")]
    assert eff_rows[1].split()[1:] == ["100", "100", "89", "73", "57"]


def test_text_table_empty_report_is_header_only():
    scaling = report.ScalingReport(base_cpus=28, entries=(), provenance={})
    text = emit_table(scaling, "text").decode("utf-8")
    assert "Environment" in text
    assert "x" not in text.replace("x)", "")  # no data rows


def test_json_round_trip_preserves_exact_ratios():
    scaling = build_report(ACROBOT, base_cpus=28)
    parsed = parse_report_json(emit_table(scaling, "json"))
    assert parsed.base_cpus == scaling.base_cpus
    assert parsed.entries == scaling.entries


def test_csv_report_is_lossless():
    scaling = build_report(ACROBOT, base_cpus=28)
    text = emit_table(scaling, "csv").decode("utf-8")
    lines = text.splitlines()
    assert lines[0] == "env,total_cpus,mean,stddev,ideal_factor,actual_factor,efficiency_pct"
    top = lines[-1].split(",")
    assert float(top[5]) == scaling.entries[-1].actual_factor  # unrounded


def test_series_ideal_extrapolation_and_band():
    scaling = build_report(ACROBOT, base_cpus=28)
    text = emit_scaling_series(scaling).decode("utf-8")
    lines = text.splitlines()
    assert lines[0] == "env,cpus,ideal,mean,lo_2sigma,hi_2sigma"
    rows = {int(line.split(",")[1]): line.split(",") for line in lines[1:]}
    # ideal at 868 = 5656 * 31
    assert float(rows[868][2]) == 5656 * 31 == 175336
    # band at base = 5656 +- 2*1063
    assert float(rows[28][4]) == 5656 - 2 * 1063
    assert float(rows[28][5]) == 5656 + 2 * 1063


def test_series_measured_below_ideal_for_sublinear_env():
    humanoid = [
        m("Humanoid", 28, 4108), m("Humanoid", 84, 8579),
        m("Humanoid", 196, 12991), m("Humanoid", 420, 16211),
        m("Humanoid", 868, 11969),
    ]
    scaling = build_report(humanoid, base_cpus=28)
    text = emit_scaling_series(scaling).decode("utf-8")
    for line in text.splitlines()[1:]:
        parts = line.split(",")
        assert float(parts[3]) <= float(parts[2])  # mean <= ideal


# --- properties -----------------------------------------------------------------------------


@settings(max_examples=300, deadline=None)
@given(
    base=st.floats(min_value=1.0, max_value=1e6),
    ratios=st.lists(st.floats(min_value=0.01, max_value=50.0), min_size=1, max_size=6),
    scale=st.floats(min_value=0.001, max_value=1000.0),
)
def test_scale_invariance_property(base, ratios, scale):
    cpus_ladder = [28 * (i + 2) for i in range(len(ratios))]
    rows = [m("E", 28, base)] + [
        m("E", cpus, base * r) for cpus, r in zip(cpus_ladder, ratios)
    ]
    scaled = [m(r.env_name, r.total_cpus, r.mean * scale) for r in rows]
    a = build_report(rows, base_cpus=28)
    b = build_report(scaled, base_cpus=28)
    for ea, eb in zip(a.entries, b.entries):
        # rule out inputs landing exactly on a rounding boundary, where a
        # one-ulp perturbation from the scaling flips the integer
        raw = 100.0 * ea.actual_factor / ea.ideal_factor
        assume(abs(raw - math.floor(raw) - 0.5) > 1e-6)
        assert math.isclose(ea.actual_factor, eb.actual_factor, rel_tol=1e-9)
        assert ea.efficiency_pct == eb.efficiency_pct


@settings(max_examples=300, deadline=None)
@given(
    actual=st.floats(min_value=0.0, max_value=1000.0),
    ideal=st.floats(min_value=0.01, max_value=1000.0),
)
def test_cap_rule_property(actual, ideal):
    eff = efficiency(actual, ideal)
    assert 0 <= eff <= 100
    if actual >= ideal:
        assert eff == 100


def test_fixture_file_matches_packaged_digest():
    path = report.paper_fixture_path()
    measurements = report.read_measurements_csv(path)
    assert len(measurements) == 70  # 14 envs x 5 configurations
    assert len({row.env_name for row in measurements}) == 14
