# SPDX-FileCopyrightText: Magenta ApS
#
# SPDX-License-Identifier: MPL-2.0
"""One latency-under-load test, run in the order of the field measurement.

1. Admission: the measurement server must have spare capacity and the client
   must be idle (`admission_check`).
2. The load flows start at t=0.
3. Probing starts once the load has ramped up (`detect_ramp_up`).
4. Closed-loop UDP request/response probes run for `probe_duration`.
5. Load stops `teardown_guard` after the last probe completed.
"""
import csv
import io
import json
import logging
from dataclasses import dataclass
from dataclasses import field
from pathlib import Path
from typing import Any
from typing import Dict
from typing import List
from typing import NamedTuple
from typing import Optional
from typing import Sequence
from typing import Set

import numpy as np
from numpy.typing import ArrayLike

from upstream_aqm_sim.config import as_record
from upstream_aqm_sim.netmodel import LinkConfig
from upstream_aqm_sim.netmodel import MAX_PACKET_BYTES
from upstream_aqm_sim.netmodel import MIN_PACKET_BYTES
from upstream_aqm_sim.netmodel import PacketFactory
from upstream_aqm_sim.netmodel import UpstreamPort
from upstream_aqm_sim.qdisc import BUFFER_CONTROL_DELAY
from upstream_aqm_sim.qdisc import buffer_control_limit
from upstream_aqm_sim.qdisc import Discipline
from upstream_aqm_sim.qdisc import make_discipline
from upstream_aqm_sim.qdisc import PieParams
from upstream_aqm_sim.sim_core import milliseconds
from upstream_aqm_sim.sim_core import NANOS_PER_MILLISECOND
from upstream_aqm_sim.sim_core import NANOS_PER_SECOND
from upstream_aqm_sim.sim_core import seconds
from upstream_aqm_sim.sim_core import SimTime
from upstream_aqm_sim.sim_core import SimulationFault
from upstream_aqm_sim.sim_core import Simulator
from upstream_aqm_sim.sim_core import to_milliseconds
from upstream_aqm_sim.traffic import BulkFlow
from upstream_aqm_sim.traffic import ConstantRateSource
from upstream_aqm_sim.traffic import MeasurementServer
from upstream_aqm_sim.traffic import PROBE_TIMEOUT
from upstream_aqm_sim.traffic import ProbeClient
from upstream_aqm_sim.traffic import ProbeSample

logger = logging.getLogger(__name__)


MAX_LOAD_FLOWS = 16
UPSTREAM_PROBE_DURATION = seconds(7)


@dataclass(frozen=True)
class TestConfig:
    """Everything that determines one test; equal configs give equal reports."""

    __test__ = False  # not a pytest class

    label: str = "test"
    discipline: Discipline = Discipline.DOCSIS_PIE
    link: LinkConfig = LinkConfig()
    load_flows: int = 4
    mss: int = MAX_PACKET_BYTES
    buffer_delay: SimTime = BUFFER_CONTROL_DELAY
    """Drain time of the buffer-control FIFO."""
    pie: PieParams = PieParams()
    cross_rate_bps: int = 0
    cross_packet_bytes: int = MAX_PACKET_BYTES
    probe_size_bytes: int = MIN_PACKET_BYTES
    probe_timeout: SimTime = PROBE_TIMEOUT
    probe_duration: SimTime = UPSTREAM_PROBE_DURATION
    warmup_cap: SimTime = seconds(5)
    teardown_guard: SimTime = milliseconds(250)
    sample_interval: SimTime = milliseconds(100)
    ramp_window: SimTime = milliseconds(500)
    ramp_threshold: float = 0.9
    seed: int = 0

    def __post_init__(self) -> None:
        if self.probe_duration <= 0:
            raise ValueError("probe_duration must be positive")
        if not 0 <= self.load_flows <= MAX_LOAD_FLOWS:
            raise ValueError(f"load_flows must be within [0, {MAX_LOAD_FLOWS}]")
        if not MIN_PACKET_BYTES <= self.mss <= MAX_PACKET_BYTES:
            raise ValueError("mss outside the valid packet size range")
        if not MIN_PACKET_BYTES <= self.probe_size_bytes <= MAX_PACKET_BYTES:
            raise ValueError("probe_size_bytes outside the valid packet size range")
        if not MIN_PACKET_BYTES <= self.cross_packet_bytes <= MAX_PACKET_BYTES:
            raise ValueError("cross_packet_bytes outside the valid packet size range")
        if self.cross_rate_bps < 0:
            raise ValueError("cross_rate_bps must not be negative")
        if self.probe_timeout <= 0 or self.sample_interval <= 0:
            raise ValueError("probe_timeout and sample_interval must be positive")
        if self.ramp_window < self.sample_interval:
            raise ValueError("ramp_window must span at least one sample")
        if not 0 < self.ramp_threshold <= 1:
            raise ValueError("ramp_threshold must be within (0, 1]")
        if self.buffer_delay < 0 or self.warmup_cap < 0 or self.teardown_guard < 0:
            raise ValueError("Delays must not be negative")


def sanity_scenario(discipline: Discipline, seed: int = 0) -> TestConfig:
    """The demo: saturated upstream, no path delay, PIE vs a 1 s legacy buffer.

    Expect roughly 10 ms with PIE and roughly one second without.
    """
    return TestConfig(
        label=f"sanity-{discipline.value}",
        discipline=discipline,
        link=LinkConfig(mac_access_delay=SimTime(0), base_rtt=SimTime(0)),
        buffer_delay=seconds(1),
        seed=seed,
    )


class LatencyStats(NamedTuple):
    mean_ms: float
    max_ms: float
    p50_ms: float
    p90_ms: float
    p99_ms: float


def nearest_rank(values: ArrayLike, quantile: float) -> float:
    """Nearest-rank percentile of a non-empty sequence.

    The smallest value whose empirical CDF reaches `quantile`.
    """
    return float(np.quantile(values, quantile, method="inverted_cdf"))


def summarize(samples: Sequence[int]) -> LatencyStats:
    """Mean, max and nearest-rank percentiles of RTT samples in nanoseconds.

    Raises:
        ValueError: If there are no samples.
    """
    if not samples:
        raise ValueError("Cannot summarize zero samples")
    values = np.asarray(samples, dtype=np.int64)
    return LatencyStats(
        mean_ms=float(np.mean(values)) / NANOS_PER_MILLISECOND,
        max_ms=to_milliseconds(int(np.max(values))),
        p50_ms=to_milliseconds(nearest_rank(values, 0.50)),
        p90_ms=to_milliseconds(nearest_rank(values, 0.90)),
        p99_ms=to_milliseconds(nearest_rank(values, 0.99)),
    )


def format_float(value: float) -> str:
    """Six significant digits, the number format of every CSV we write."""
    return f"{value:.6g}"


@dataclass
class TestReport:
    """Outcome of one test. Statistics derive from `samples` only."""

    __test__ = False  # not a pytest class

    label: str
    discipline: Discipline
    samples: List[ProbeSample]
    stats: Optional[LatencyStats]
    achieved_throughput_bps: float
    ramp_up_at: SimTime
    ramp_up_fallback: bool
    load_stopped_at: SimTime
    discarded_responses: int
    flow_accounting: Dict[str, Dict[str, int]] = field(default_factory=dict)
    """Per flow: packets accepted, dropped, departed, queued and in service."""
    config: Dict[str, str] = field(default_factory=dict)
    invalid_reason: Optional[str] = None

    @property
    def valid(self) -> bool:
        return self.invalid_reason is None

    @property
    def rtts(self) -> List[SimTime]:
        return [sample.rtt for sample in self.samples]

    @property
    def censored_count(self) -> int:
        return sum(1 for sample in self.samples if sample.censored)

    def as_dict(self) -> Dict[str, Any]:
        stats = self.stats._asdict() if self.stats is not None else None
        return {
            "label": self.label,
            "discipline": self.discipline.value,
            "device_model": self.discipline.device_model,
            "valid": self.valid,
            "invalid_reason": self.invalid_reason,
            "stats": stats,
            "sample_count": len(self.samples),
            "censored_count": self.censored_count,
            "discarded_responses": self.discarded_responses,
            "flow_accounting": self.flow_accounting,
            "rtts_ns": self.rtts,
            "achieved_throughput_bps": self.achieved_throughput_bps,
            "ramp_up_at_ns": self.ramp_up_at,
            "ramp_up_fallback": self.ramp_up_fallback,
            "load_stopped_at_ns": self.load_stopped_at,
            "config": self.config,
        }

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), indent=2, sort_keys=True) + "\n"

    def samples_csv(self) -> str:
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(["probe_seq", "rtt_ms"])
        for sample in self.samples:
            writer.writerow([sample.seq, format_float(to_milliseconds(sample.rtt))])
        return buffer.getvalue()

    def write(self, out_dir: Path) -> List[Path]:
        """Write `report.json` and `samples.csv` into `out_dir`."""
        out_dir.mkdir(parents=True, exist_ok=True)
        report_path = out_dir / "report.json"
        samples_path = out_dir / "samples.csv"
        report_path.write_text(self.to_json(), encoding="utf-8", newline="\n")
        samples_path.write_text(self.samples_csv(), encoding="utf-8", newline="\n")
        return [report_path, samples_path]


class AdmissionRejected(RuntimeError):
    """The measurement system cannot take the test now; try again later."""


@dataclass(frozen=True)
class Reservation:
    client: str
    demand_bps: int


@dataclass
class AdmissionState:
    """Measurement server resource pool plus the clients currently testing."""

    server_capacity_bps: int
    reserved_bps: int = 0
    busy_clients: Set[str] = field(default_factory=set)


def admission_check(
    st: AdmissionState, demand_bps: int, client: str = "client"
) -> Reservation:
    """Reserve `demand_bps` of server capacity for `client`.

    Args:
        st: The pool; updated on acceptance.
        demand_bps: Peak load of the test.
        client: The requesting client, which must not be testing already.

    Raises:
        ValueError: If `demand_bps` is not positive.
        AdmissionRejected: If capacity is short or the client is busy.

    Returns:
        The reservation, to be handed back to `release_reservation`.
    """
    if demand_bps <= 0:
        raise ValueError("demand_bps must be positive")
    if client in st.busy_clients:
        raise AdmissionRejected(f"Client {client} is already testing")
    if st.reserved_bps + demand_bps > st.server_capacity_bps:
        raise AdmissionRejected(
            f"Server has {st.server_capacity_bps - st.reserved_bps} bps free, "
            f"{demand_bps} bps requested"
        )
    st.reserved_bps += demand_bps
    st.busy_clients.add(client)
    return Reservation(client, demand_bps)


def release_reservation(st: AdmissionState, reservation: Reservation) -> None:
    """Hand a reservation's capacity back to the server pool."""
    if reservation.client not in st.busy_clients:
        raise SimulationFault(f"Reservation of {reservation.client} released twice")
    st.busy_clients.discard(reservation.client)
    st.reserved_bps -= reservation.demand_bps


class RampUp(NamedTuple):
    at: SimTime
    fallback: bool


def detect_ramp_up(
    series: Sequence[float],
    shaped_rate: float,
    sample_interval: SimTime = milliseconds(100),
    window: SimTime = milliseconds(500),
    threshold: float = 0.9,
    warmup_cap: SimTime = seconds(5),
) -> RampUp:
    """Find when the load has reached its steady-state peak.

    `series[i]` is the throughput in bps over
    `[i * sample_interval, (i + 1) * sample_interval)`. The load has ramped up
    at the first sample boundary `t` where the two windows ending at
    `t - window` and at `t` each average at least `threshold * shaped_rate`.

    Returns:
        The ramp-up time, or `warmup_cap` flagged as a fallback if the series
        never qualifies before the cap.
    """
    per_window = window // sample_interval
    floor = threshold * shaped_rate
    for end in range(2 * per_window, len(series) + 1):
        at = SimTime(end * sample_interval)
        if at > warmup_cap:
            break
        earlier = series[end - 2 * per_window : end - per_window]
        later = series[end - per_window : end]
        if (
            sum(earlier) / per_window >= floor
            and sum(later) / per_window >= floor
        ):
            return RampUp(at, False)
    return RampUp(warmup_cap, True)


class LatencyUnderLoadTest:
    """The simulated test bed of one device: modem upstream, load, probe."""

    def __init__(self, cfg: TestConfig) -> None:
        self.cfg = cfg
        self.sim = Simulator(cfg.seed)
        factory = PacketFactory(self.sim)
        self.server = MeasurementServer(self.sim, cfg.link, cfg.sample_interval)
        self.qdisc = make_discipline(
            cfg.discipline, cfg.link, cfg.buffer_delay, cfg.pie, self.sim.rng("pie")
        )
        self.port = UpstreamPort(self.sim, cfg.link, self.qdisc, self.server.on_delivered)
        ssthresh = buffer_control_limit(cfg.link.rate_bps, BUFFER_CONTROL_DELAY)
        self.flows = [
            BulkFlow(
                self.sim, f"bulk-{i}", self.port, self.server, factory, ssthresh, cfg.mss
            )
            for i in range(cfg.load_flows)
        ]
        self.cross: Optional[ConstantRateSource] = None
        if cfg.cross_rate_bps > 0:
            self.cross = ConstantRateSource(
                self.sim,
                "cross",
                self.port,
                factory,
                cfg.cross_rate_bps,
                cfg.cross_packet_bytes,
            )
        self.probe = ProbeClient(
            self.sim,
            self.port,
            self.server,
            factory,
            timeout=cfg.probe_timeout,
            size_bytes=cfg.probe_size_bytes,
        )
        self.throughput: List[float] = []
        self.ramp_up: Optional[RampUp] = None
        self.load_stopped_at: Optional[SimTime] = None

    def run(self) -> TestReport:
        cfg = self.cfg
        self.qdisc.attach(self.sim)
        for flow in self.flows:
            flow.start()
        if self.cross is not None:
            self.cross.start()
        self.sim.schedule(cfg.sample_interval, "harness", "sample", self._on_sample)
        horizon = (
            cfg.warmup_cap
            + cfg.sample_interval
            + cfg.probe_duration
            + cfg.probe_timeout
            + cfg.teardown_guard
        )
        self.sim.run_until(SimTime(horizon))
        if self.load_stopped_at is None or self.ramp_up is None:
            raise SimulationFault(f"{cfg.label}: test did not finish by {horizon}ns")
        return self._report(self.ramp_up, self.load_stopped_at)

    def _on_sample(self) -> None:
        cfg = self.cfg
        now = self.sim.now
        index = len(self.throughput)
        arrived = self.server.arrived_bytes
        sampled = arrived[index] if index < len(arrived) else 0
        self.throughput.append(sampled * 8 * NANOS_PER_SECOND / cfg.sample_interval)

        ramp_up = detect_ramp_up(
            self.throughput,
            cfg.link.rate_bps,
            cfg.sample_interval,
            cfg.ramp_window,
            cfg.ramp_threshold,
            cfg.warmup_cap,
        )
        if not ramp_up.fallback:
            self._start_probing(RampUp(now, False))
        elif now >= cfg.warmup_cap:
            logger.debug("%s: load never ramped up, probing anyway", cfg.label)
            self._start_probing(RampUp(now, True))
        else:
            self.sim.schedule_in(cfg.sample_interval, "harness", "sample", self._on_sample)

    def _start_probing(self, ramp_up: RampUp) -> None:
        self.ramp_up = ramp_up
        stop_at = SimTime(ramp_up.at + self.cfg.probe_duration)
        self.probe.start(stop_at, self._on_probe_finished)

    def _on_probe_finished(self, at: SimTime) -> None:
        self.sim.schedule(
            SimTime(at + self.cfg.teardown_guard), "harness", "teardown", self._stop_load
        )

    def _stop_load(self) -> None:
        for flow in self.flows:
            flow.stop()
        if self.cross is not None:
            self.cross.stop()
        self.load_stopped_at = self.sim.now
        self.sim.stop()

    def _flow_accounting(self) -> Dict[str, Dict[str, int]]:
        counters = self.port.counters
        in_service = self.port.in_service
        flows = sorted(set(counters.accepted) | set(counters.dropped))
        return {
            flow_id: {
                "accepted": counters.accepted[flow_id],
                "dropped": counters.dropped[flow_id],
                "departed": counters.departed[flow_id],
                "queued": self.port.queued(flow_id),
                "in_service": int(
                    in_service is not None and in_service.flow_id == flow_id
                ),
            }
            for flow_id in flows
        }

    def _report(self, ramp_up: RampUp, load_stopped_at: SimTime) -> TestReport:
        cfg = self.cfg
        samples = list(self.probe.state.samples)
        window_end = SimTime(ramp_up.at + cfg.probe_duration)
        delivered = self.server.bytes_between(ramp_up.at, window_end)
        throughput = delivered * 8 * NANOS_PER_SECOND / cfg.probe_duration

        stats: Optional[LatencyStats] = None
        invalid_reason: Optional[str] = None
        try:
            stats = summarize([sample.rtt for sample in samples])
        except ValueError:
            invalid_reason = "no probe samples"
            logger.warning("%s: report invalid, %s", cfg.label, invalid_reason)

        report = TestReport(
            label=cfg.label,
            discipline=cfg.discipline,
            samples=samples,
            stats=stats,
            achieved_throughput_bps=throughput,
            ramp_up_at=ramp_up.at,
            ramp_up_fallback=ramp_up.fallback,
            load_stopped_at=load_stopped_at,
            discarded_responses=self.probe.state.discarded,
            flow_accounting=self._flow_accounting(),
            config=as_record(cfg),
            invalid_reason=invalid_reason,
        )
        if stats is not None:
            logger.info(
                "%s: %s mean %.2f ms, max %.2f ms over %d probes",
                cfg.label,
                cfg.discipline.value,
                stats.mean_ms,
                stats.max_ms,
                len(samples),
            )
        return report


def run_latency_under_load(cfg: TestConfig) -> TestReport:
    """Run one test. Admission is the caller's business."""
    return LatencyUnderLoadTest(cfg).run()
