# SPDX-FileCopyrightText: Magenta ApS
#
# SPDX-License-Identifier: MPL-2.0
import dataclasses
from typing import Any
from typing import List

import pytest

from upstream_aqm_sim.fleet import DeviceResult
from upstream_aqm_sim.fleet import FleetConfig
from upstream_aqm_sim.fleet import FleetSummary
from upstream_aqm_sim.fleet import summarize_fleet
from upstream_aqm_sim.harness import TestConfig
from upstream_aqm_sim.netmodel import LinkConfig
from upstream_aqm_sim.netmodel import Packet
from upstream_aqm_sim.netmodel import PacketFactory
from upstream_aqm_sim.netmodel import PacketKind
from upstream_aqm_sim.qdisc import Discipline
from upstream_aqm_sim.qdisc import PieParams
from upstream_aqm_sim.qdisc import PieState
from upstream_aqm_sim.sim_core import milliseconds
from upstream_aqm_sim.sim_core import seconds
from upstream_aqm_sim.sim_core import SimTime
from upstream_aqm_sim.sim_core import Simulator

MSS = 1500

# One byte per nanosecond: backlog bytes equal queue delay nanoseconds
UNIT_RATE_BPS = 8_000_000_000


def make_packet(
    size_bytes: int = MSS,
    flow_id: str = "flow",
    kind: PacketKind = PacketKind.BULK,
    seq: int = 0,
) -> Packet:
    return PacketFactory(Simulator()).make(flow_id, kind, size_bytes, seq=seq)


def fast_config(
    discipline: Discipline = Discipline.DOCSIS_PIE, **overrides: Any
) -> TestConfig:
    """A short test: one second of probing after at most two of warm-up."""
    values: Any = dict(
        label="fast",
        discipline=discipline,
        probe_duration=seconds(1),
        warmup_cap=seconds(2),
    )
    values.update(overrides)
    return TestConfig(**values)


def fast_fleet(devices: int = 6, master_seed: int = 3) -> FleetConfig:
    template = dataclasses.replace(
        fast_config(), probe_duration=milliseconds(500), warmup_cap=seconds(1)
    )
    return FleetConfig(
        devices=devices,
        master_seed=master_seed,
        flows_max=4,
        template=template,
    )


def pie_state(
    drop_prob: float = 0.0,
    qdelay: int = 0,
    qdelay_old: int = 0,
    burst_allowance: int = 0,
    params: PieParams = PieParams(),
) -> PieState:
    """Controller state whose current queue delay estimate is `qdelay`."""
    return PieState(
        params=params,
        rate_bps=UNIT_RATE_BPS,
        hard_limit_bytes=10 ** 12,
        drop_prob=drop_prob,
        qdelay_cur=SimTime(qdelay_old),
        qdelay_old=SimTime(qdelay_old),
        burst_allowance=SimTime(burst_allowance),
        backlog_bytes=qdelay,
    )


def reference_pie_probability(
    p: float, qdelay: int, qdelay_old: int, params: PieParams = PieParams()
) -> float:
    """Straight-line drop probability update, written out branch by branch."""
    q = qdelay / 1_000_000_000
    q_old = qdelay_old / 1_000_000_000
    target = params.latency_target / 1_000_000_000
    delta = params.gain_a * (q - target) + params.gain_b * (q - q_old)
    if p < 0.000001:
        delta = delta / 2048
    elif p < 0.00001:
        delta = delta / 512
    elif p < 0.0001:
        delta = delta / 128
    elif p < 0.001:
        delta = delta / 32
    elif p < 0.01:
        delta = delta / 8
    elif p < 0.1:
        delta = delta / 2
    p = p + delta
    if qdelay == 0 and qdelay_old == 0:
        p = p * 0.98
    if p < 0.0:
        p = 0.0
    if p > 1.0:
        p = 1.0
    return p


def device(
    device_id: int,
    mean_ms: float,
    max_ms: float,
    discipline: Discipline = Discipline.DOCSIS_PIE,
) -> DeviceResult:
    return DeviceResult(
        device_id=device_id,
        discipline=discipline,
        rate_bps=10_000_000,
        flows=4,
        base_rtt_ms=10.0,
        mean_ms=mean_ms,
        max_ms=max_ms,
        p99_ms=max_ms,
    )


def synthetic_devices() -> List[DeviceResult]:
    pie = [device(i, 16.0 + i % 10, 28.0 + i % 7) for i in range(20)]
    fifo = [
        device(20 + i, 240.0 + i, 290.0 + 40 * i, Discipline.BUFFER_CONTROL_FIFO)
        for i in range(10)
    ]
    return pie + fifo


@pytest.fixture
def sim() -> Simulator:
    return Simulator(seed=1)


@pytest.fixture
def link() -> LinkConfig:
    return LinkConfig()


@pytest.fixture
def summary() -> FleetSummary:
    return summarize_fleet(synthetic_devices(), master_seed=5, config={"devices": "30"})
