# SPDX-FileCopyrightText: Magenta ApS
#
# SPDX-License-Identifier: MPL-2.0
import dataclasses
import json
from collections import Counter
from pathlib import Path
from typing import Any
from typing import Dict
from typing import List
from warnings import catch_warnings

import pytest
from hypothesis import given
from hypothesis import strategies as st
from more_itertools import first
from tenacity import stop_after_delay

from .utils import fast_fleet
from upstream_aqm_sim.fleet import AsyncFleetRunner
from upstream_aqm_sim.fleet import compare
from upstream_aqm_sim.fleet import emit_reports
from upstream_aqm_sim.fleet import empirical_cdf
from upstream_aqm_sim.fleet import FleetConfig
from upstream_aqm_sim.fleet import FleetRunError
from upstream_aqm_sim.fleet import FleetRunner
from upstream_aqm_sim.fleet import FleetSummary
from upstream_aqm_sim.fleet import format_comparison
from upstream_aqm_sim.fleet import histogram
from upstream_aqm_sim.fleet import load_summary
from upstream_aqm_sim.fleet import ReportError
from upstream_aqm_sim.fleet import run_fleet
from upstream_aqm_sim.fleet import sample_population
from upstream_aqm_sim.fleet import summarize_fleet
from upstream_aqm_sim.harness import AdmissionRejected
from upstream_aqm_sim.harness import summarize
from upstream_aqm_sim.harness import TestConfig
from upstream_aqm_sim.harness import TestReport
from upstream_aqm_sim.qdisc import Discipline
from upstream_aqm_sim.sim_core import milliseconds
from upstream_aqm_sim.sim_core import SimTime
from upstream_aqm_sim.traffic import ProbeSample

PIE = Discipline.DOCSIS_PIE
FIFO = Discipline.BUFFER_CONTROL_FIFO


def test_empty_population():
    assert sample_population(FleetConfig(devices=0)) == []


def test_population_is_reproducible():
    cfg = FleetConfig(devices=40, master_seed=9)
    assert sample_population(cfg) == sample_population(cfg)
    other = sample_population(dataclasses.replace(cfg, master_seed=10))
    assert other != sample_population(cfg)


def test_discipline_mix_is_apportioned():
    population = sample_population(FleetConfig(devices=1000))
    counts = Counter(device.discipline for device in population)
    assert counts == {PIE: 680, FIFO: 320}

    first_25 = Counter(device.discipline for device in population[:25])
    assert first_25 == {PIE: 17, FIFO: 8}


def test_population_prefix_is_stable():
    small = sample_population(FleetConfig(devices=50, master_seed=2))
    large = sample_population(FleetConfig(devices=120, master_seed=2))
    assert large[:50] == small


def test_population_ranges():
    cfg = FleetConfig(devices=300, master_seed=1)
    population = sample_population(cfg)

    assert [device.label for device in population[:2]] == [
        "device-00000",
        "device-00001",
    ]
    assert len({device.seed for device in population}) == len(population)
    for device in population:
        assert device.link.rate_bps in cfg.rate_plans_bps
        assert cfg.flows_min <= device.load_flows <= cfg.flows_max
        assert cfg.base_rtt_min <= device.link.base_rtt <= cfg.base_rtt_max
        assert device.probe_duration == cfg.template.probe_duration
    assert {device.link.rate_bps for device in population} == set(cfg.rate_plans_bps)


def test_bloated_buffers_are_fifo_only():
    cfg = FleetConfig(devices=1000)
    population = sample_population(cfg)
    default = cfg.template.buffer_delay

    assert all(d.buffer_delay == default for d in population if d.discipline == PIE)
    bloated = [d for d in population if d.buffer_delay != default]
    assert all(d.discipline == FIFO for d in bloated)
    assert all(
        cfg.bloated_delay_min <= d.buffer_delay <= cfg.bloated_delay_max
        for d in bloated
    )
    # About 15% of 320 FIFO devices
    assert 20 <= len(bloated) <= 80


def test_no_bloat_leaves_buffers_alone():
    cfg = FleetConfig(devices=200, bloated_fraction=0.0)
    assert {d.buffer_delay for d in sample_population(cfg)} == {
        cfg.template.buffer_delay
    }


@pytest.mark.parametrize(
    "overrides",
    [
        {"devices": -1},
        {"mix": {}},
        {"mix": {PIE: 0.5, FIFO: 0.4}},
        {"mix": {PIE: 1.2, FIFO: -0.2}},
        {"rate_plans_bps": {}},
        {"rate_plans_bps": {10_000_000: 0.0}},
        {"flows_min": 5, "flows_max": 4},
        {"base_rtt_min": SimTime(0)},
        {"base_rtt_min": milliseconds(30)},
        {"bloated_fraction": 1.5},
        {"bloated_delay_min": milliseconds(2000)},
        {"server_capacity_bps": 0},
    ],
)
def test_fleet_config_invariants(overrides: Dict[str, Any]):
    with pytest.raises(ValueError):
        dataclasses.replace(FleetConfig(), **overrides)


def test_empirical_cdf():
    assert empirical_cdf([3.0, 1.0, 2.0, 2.0]) == [(1.0, 0.25), (2.0, 0.75), (3.0, 1.0)]
    assert empirical_cdf([]) == []


@given(st.lists(st.floats(min_value=0, max_value=5000), min_size=1))
def test_empirical_cdf_is_a_distribution(values: List[float]):
    points = empirical_cdf(values)
    xs = [x for x, _ in points]
    fractions = [fraction for _, fraction in points]
    assert xs == sorted(set(xs))
    assert fractions == sorted(fractions)
    assert fractions[-1] == pytest.approx(1.0)


def test_histogram_bins():
    fractions = histogram([0.0, 14.999, 15.0, 29.9, 1005.0, 5000.0])
    assert len(fractions) == 68
    assert fractions[0] == pytest.approx(2 / 6)
    assert fractions[1] == pytest.approx(2 / 6)
    assert fractions[67] == pytest.approx(2 / 6)
    assert sum(fractions[2:67]) == 0


@given(st.lists(st.floats(min_value=0, max_value=5000), min_size=1))
def test_histogram_sums_to_one(values: List[float]):
    fractions = histogram(values)
    assert len(fractions) == 68
    assert sum(fractions) == pytest.approx(1.0)


def test_summary(summary: FleetSummary):
    assert summary.variants == [FIFO, PIE]
    assert len(summary.of(PIE)) == 20
    assert len(summary.of()) == 30
    assert summary.band_fraction(PIE) == 1.0
    assert summary.band_fraction(FIFO) == 0.0
    assert summary.band_fraction() == pytest.approx(20 / 30)
    assert summary.mean_cdf[FIFO][0] == (240.0, 0.1)


def test_emit_and_load(summary: FleetSummary, tmp_path: Path):
    paths = emit_reports(summary, tmp_path / "a")
    assert sorted(path.name for path in paths) == [
        "devices.csv",
        "histogram.csv",
        "manifest.json",
        "max_cdf.csv",
        "mean_cdf.csv",
    ]
    assert load_summary(tmp_path / "a") == summary

    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert manifest["master_seed"] == 5
    assert manifest["device_count"] == 30
    assert manifest["variants"]["docsis_pie"] == {
        "device_model": "CGM4140COM",
        "devices": 20,
    }

    lines = (tmp_path / "a" / "histogram.csv").read_text().splitlines()
    assert lines[0] == "bin_low_ms,bin_high_ms,variant,fraction"
    assert len(lines) == 1 + 2 * 68
    assert lines[-1] == "1005,inf,docsis_pie,0"
    assert "15,30,docsis_pie,1" in lines


def test_cdf_csv_layout(summary: FleetSummary, tmp_path: Path):
    emit_reports(summary, tmp_path)
    header, *rows = (tmp_path / "mean_cdf.csv").read_text().splitlines()
    assert header == "variant,value_ms,cumulative_fraction"
    parsed = [row.split(",") for row in rows]
    variants = [variant for variant, _, _ in parsed]
    assert variants == sorted(variants, key=[FIFO.value, PIE.value].index)
    for discipline in (FIFO, PIE):
        points = [
            (float(value), float(fraction))
            for variant, value, fraction in parsed
            if variant == discipline.value
        ]
        assert [value for value, _ in points] == sorted(v for v, _ in points)
        assert points[-1][1] == 1.0


def test_rederived_reports_are_identical(summary: FleetSummary, tmp_path: Path):
    emit_reports(summary, tmp_path / "a")
    emit_reports(load_summary(tmp_path / "a"), tmp_path / "b")
    for name in ("devices.csv", "mean_cdf.csv", "histogram.csv", "manifest.json"):
        assert (tmp_path / "a" / name).read_bytes() == (
            tmp_path / "b" / name
        ).read_bytes()


def test_emit_into_a_file(summary: FleetSummary, tmp_path: Path):
    blocker = tmp_path / "blocker"
    blocker.write_text("")
    with pytest.raises(ReportError):
        emit_reports(summary, blocker)


def test_load_missing_report(tmp_path: Path):
    with pytest.raises(ReportError):
        load_summary(tmp_path)


@pytest.mark.parametrize(
    "header,row",
    [
        ("device_id,discipline,mean_ms", "0,docsis_pie,20"),
        (
            "device_id,discipline,rate_bps,flows,base_rtt_ms,mean_ms,max_ms,p99_ms",
            "x,docsis_pie,10000000,4,10,20,30,30",
        ),
        (
            "device_id,discipline,rate_bps,flows,base_rtt_ms,mean_ms,max_ms,p99_ms",
            "0,codel,10000000,4,10,20,30,30",
        ),
    ],
)
def test_load_malformed_devices(
    summary: FleetSummary, tmp_path: Path, header: str, row: str
):
    emit_reports(summary, tmp_path)
    (tmp_path / "devices.csv").write_text(f"{header}\n{row}\n")
    with pytest.raises(ReportError):
        load_summary(tmp_path)


def shifted(summary: FleetSummary, delta_ms: float) -> FleetSummary:
    return summarize_fleet(
        [
            dataclasses.replace(d, mean_ms=d.mean_ms + delta_ms, max_ms=d.max_ms + 1)
            for d in summary.devices
        ]
    )


def test_compare_with_itself(summary: FleetSummary):
    rows = compare(summary, summary)
    assert [row.variant for row in rows] == ["buffer_control_fifo", "docsis_pie", "all"]
    for row in rows:
        assert row.median_mean_delta_ms == 0
        assert row.median_max_delta_ms == 0
        assert row.band_fraction_delta == 0
    assert format_comparison(rows).endswith(
        "A and B have the same median latency under load\n"
    )


def test_compare_is_antisymmetric(summary: FleetSummary):
    other = shifted(summary, 5.0)
    assert compare(summary, other) == [-row for row in compare(other, summary)]


def test_compare_deltas(summary: FleetSummary):
    rows = compare(summary, shifted(summary, 5.0))
    overall = first(row for row in rows if row.variant == "all")
    assert overall.median_mean_delta_ms == -5.0
    assert overall.median_max_delta_ms == -1.0

    pie = first(row for row in rows if row.variant == "docsis_pie")
    # Shifted by 5 ms, the two 25 ms means land on 30 ms, outside the band
    assert pie.band_fraction_delta == pytest.approx(0.1)

    text = format_comparison(rows)
    assert text.splitlines()[0] == (
        "variant,median_mean_delta_ms,median_max_delta_ms,band_15_30_fraction_delta"
    )
    assert text.splitlines()[-1] == (
        "A has the lower median latency under load, by 5 ms"
    )


def test_compare_skips_unshared_variants(summary: FleetSummary):
    pie_only = summarize_fleet(summary.of(PIE))
    assert [row.variant for row in compare(summary, pie_only)] == ["docsis_pie", "all"]


def test_compare_needs_equal_bins(summary: FleetSummary):
    coarse = summarize_fleet(summary.devices, bin_width_ms=30, bin_count=34)
    with pytest.raises(ValueError):
        compare(summary, coarse)


def test_compare_empty(summary: FleetSummary):
    with pytest.raises(ValueError):
        compare(summary, summarize_fleet([]))


def test_multiple_call_warnings():
    runner = FleetRunner()
    with catch_warnings(record=True) as warnings:
        runner.aopen()
        runner.aclose()
        assert len(warnings) == 0

    with catch_warnings(record=True) as warnings:
        runner.aopen()
        assert len(warnings) == 0
    with catch_warnings(record=True) as warnings:
        runner.aopen()  # This triggers a warning
        assert len(warnings) == 1
        warning = first(warnings)
        assert issubclass(warning.category, UserWarning)
        assert "aopen called with existing executor" in str(warning.message)
    with catch_warnings(record=True) as warnings:
        runner.aclose()
        assert len(warnings) == 0

    with catch_warnings(record=True) as warnings:
        runner.aclose()  # This triggers a warning
        assert len(warnings) == 1
        warning = first(warnings)
        assert issubclass(warning.category, UserWarning)
        assert "aclose called without executor" in str(warning.message)


def test_workers_must_be_positive():
    with pytest.raises(ValueError):
        AsyncFleetRunner(workers=0)


def test_small_fleet():
    cfg = fast_fleet(devices=4)
    summary = run_fleet(cfg)
    assert [device.device_id for device in summary.devices] == [0, 1, 2, 3]
    assert summary.invalid_count == 0
    assert summary.master_seed == cfg.master_seed
    assert summary.config["devices"] == "4"
    for device, scenario in zip(summary.devices, sample_population(cfg)):
        assert device.discipline == scenario.discipline
        assert device.rate_bps == scenario.link.rate_bps
        assert device.mean_ms >= device.base_rtt_ms
        assert device.max_ms >= device.p99_ms >= 0


def test_worker_count_does_not_change_results():
    cfg = fast_fleet(devices=3)
    assert run_fleet(cfg, workers=1) == run_fleet(cfg, workers=2)


def fake_report(cfg: TestConfig, valid: bool = True) -> TestReport:
    samples = [ProbeSample(0, milliseconds(20))] if valid else []
    return TestReport(
        label=cfg.label,
        discipline=cfg.discipline,
        samples=samples,
        stats=summarize([milliseconds(20)]) if valid else None,
        achieved_throughput_bps=float(cfg.link.rate_bps),
        ramp_up_at=milliseconds(1000),
        ramp_up_fallback=False,
        load_stopped_at=milliseconds(2000),
        discarded_responses=0,
        invalid_reason=None if valid else "no probe samples",
    )


def first_device_invalid(cfg: TestConfig) -> TestReport:
    return fake_report(cfg, valid=cfg.label != "device-00000")


def test_one_percent_invalid_is_tolerated(monkeypatch: Any):
    monkeypatch.setattr(
        "upstream_aqm_sim.fleet.run_latency_under_load", first_device_invalid
    )
    summary = run_fleet(FleetConfig(devices=100))
    assert summary.invalid_count == 1
    assert len(summary.devices) == 99
    assert summary.devices[0].device_id == 1


def test_too_many_invalid_reports(monkeypatch: Any):
    monkeypatch.setattr(
        "upstream_aqm_sim.fleet.run_latency_under_load", first_device_invalid
    )
    with pytest.raises(FleetRunError):
        run_fleet(FleetConfig(devices=50))


async def test_empty_population_is_refused():
    async with AsyncFleetRunner() as runner:
        with pytest.raises(ValueError):
            await runner.run([])


async def test_admission_waits_for_capacity(monkeypatch: Any):
    monkeypatch.setattr("upstream_aqm_sim.fleet.run_latency_under_load", fake_report)
    population = sample_population(FleetConfig(devices=3, master_seed=4))
    capacity = max(device.link.rate_bps for device in population)
    async with AsyncFleetRunner() as runner:
        reports = await runner.run(population, server_capacity_bps=capacity)
    assert [report.label for report in reports] == [d.label for d in population]


async def test_admission_rejected(monkeypatch: Any):
    monkeypatch.setattr(AsyncFleetRunner._admit.retry, "stop", stop_after_delay(0))
    population = sample_population(FleetConfig(devices=1))
    async with AsyncFleetRunner() as runner:
        with pytest.raises(AdmissionRejected):
            await runner.run(population, server_capacity_bps=1)
