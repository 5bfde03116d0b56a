# SPDX-FileCopyrightText: Magenta ApS
#
# SPDX-License-Identifier: MPL-2.0
"""Traffic sources and the far end of the measurement path.

* `BulkFlow`: byte-stream AIMD load, the throughput measurement.
* `ProbeClient`: closed-loop UDP request/response latency probe.
* `ConstantRateSource`: optional cross traffic.
* `MeasurementServer`: acknowledges load and turns probes around.
"""
from dataclasses import dataclass
from dataclasses import field
from dataclasses import replace
from enum import Enum
from typing import Callable
from typing import Dict
from typing import List
from typing import NamedTuple
from typing import Optional
from typing import Tuple

from upstream_aqm_sim.netmodel import deliver_downstream
from upstream_aqm_sim.netmodel import LinkConfig
from upstream_aqm_sim.netmodel import MAX_PACKET_BYTES
from upstream_aqm_sim.netmodel import MIN_PACKET_BYTES
from upstream_aqm_sim.netmodel import Packet
from upstream_aqm_sim.netmodel import PacketFactory
from upstream_aqm_sim.netmodel import PacketKind
from upstream_aqm_sim.netmodel import serialize_time
from upstream_aqm_sim.netmodel import UpstreamPort
from upstream_aqm_sim.sim_core import Event
from upstream_aqm_sim.sim_core import seconds
from upstream_aqm_sim.sim_core import SimTime
from upstream_aqm_sim.sim_core import Simulator

INITIAL_WINDOW_SEGMENTS = 4
PROBE_TIMEOUT = seconds(3)


class Phase(str, Enum):
    SLOW_START = "slow_start"
    CONGESTION_AVOIDANCE = "congestion_avoidance"


@dataclass(frozen=True)
class AimdState:
    cwnd_bytes: float
    ssthresh_bytes: float
    srtt: SimTime
    inflight_bytes: int = 0
    mss: int = MAX_PACKET_BYTES
    phase: Phase = Phase.SLOW_START
    last_decrease: Optional[SimTime] = None

    @classmethod
    def initial(
        cls, ssthresh_bytes: float, srtt: SimTime, mss: int = MAX_PACKET_BYTES
    ) -> "AimdState":
        return cls(
            cwnd_bytes=float(INITIAL_WINDOW_SEGMENTS * mss),
            ssthresh_bytes=max(float(ssthresh_bytes), float(2 * mss)),
            srtt=srtt,
            mss=mss,
        )


def aimd_on_ack(st: AimdState, acked_bytes: int) -> AimdState:
    """Grow the window for `acked_bytes` of newly acknowledged data.

    Slow start adds the acknowledged bytes (doubling per RTT) until the
    window reaches `ssthresh`; congestion avoidance adds `mss * acked / cwnd`
    (one segment per RTT).

    Raises:
        ValueError: If `acked_bytes` is not positive.
    """
    if acked_bytes <= 0:
        raise ValueError("acked_bytes must be positive")
    inflight = max(0, st.inflight_bytes - acked_bytes)
    if st.phase is Phase.SLOW_START:
        cwnd = st.cwnd_bytes + acked_bytes
        phase = Phase.CONGESTION_AVOIDANCE if cwnd >= st.ssthresh_bytes else st.phase
        return replace(st, cwnd_bytes=cwnd, phase=phase, inflight_bytes=inflight)
    cwnd = st.cwnd_bytes + st.mss * acked_bytes / st.cwnd_bytes
    return replace(st, cwnd_bytes=cwnd, inflight_bytes=inflight)


def aimd_on_loss(st: AimdState, now: SimTime, lost_bytes: int = 0) -> AimdState:
    """Halve the window, at most once per smoothed RTT.

    `lost_bytes` leave the flight whether or not the window shrinks.
    """
    inflight = max(0, st.inflight_bytes - lost_bytes)
    if st.last_decrease is not None and now - st.last_decrease < st.srtt:
        return replace(st, inflight_bytes=inflight)
    cwnd = max(st.cwnd_bytes / 2, float(2 * st.mss))
    return replace(
        st,
        cwnd_bytes=cwnd,
        ssthresh_bytes=cwnd,
        phase=Phase.CONGESTION_AVOIDANCE,
        last_decrease=now,
        inflight_bytes=inflight,
    )


def aimd_on_rtt_sample(st: AimdState, rtt: SimTime) -> AimdState:
    """Fold an RTT sample into the smoothed RTT (gain 1/8)."""
    return replace(st, srtt=SimTime((7 * st.srtt + rtt) // 8))


def aimd_can_send(st: AimdState) -> int:
    """Bytes the window allows now, in whole segments."""
    room = max(0.0, st.cwnd_bytes - st.inflight_bytes)
    return int(room // st.mss) * st.mss


class ProbeSample(NamedTuple):
    seq: int
    rtt: SimTime
    censored: bool = False


@dataclass
class ProbeState:
    """UDP request/response state; at most one request is outstanding.

    The probe functions update the state in place and return it.
    """

    next_seq: int = 0
    outstanding: Optional[Tuple[int, SimTime]] = None
    samples: List[ProbeSample] = field(default_factory=list)
    timeout: SimTime = PROBE_TIMEOUT
    discarded: int = 0

    @property
    def censored_count(self) -> int:
        return sum(1 for sample in self.samples if sample.censored)


def probe_expire(st: ProbeState, now: SimTime) -> bool:
    """Abandon the outstanding request once it is older than the timeout.

    The abandoned request is recorded as a sample censored at the timeout.

    Returns:
        `True` if a request was abandoned.
    """
    if st.outstanding is None:
        return False
    seq, sent_at = st.outstanding
    if now - sent_at < st.timeout:
        return False
    st.samples.append(ProbeSample(seq, st.timeout, censored=True))
    st.outstanding = None
    return True


def probe_tick(
    st: ProbeState,
    now: SimTime,
    factory: PacketFactory,
    flow_id: str = "probe",
    size_bytes: int = MIN_PACKET_BYTES,
) -> Optional[Packet]:
    """Emit the next request unless one is still in flight.

    A request older than the timeout is abandoned and recorded as a sample
    censored at the timeout value.

    Returns:
        The request packet, or `None` while waiting for a response.
    """
    if st.outstanding is not None and not probe_expire(st, now):
        return None
    seq = st.next_seq
    st.next_seq += 1
    st.outstanding = (seq, now)
    return factory.make(flow_id, PacketKind.PROBE_REQUEST, size_bytes, seq=seq)


def probe_on_response(st: ProbeState, seq: int, now: SimTime) -> ProbeState:
    """Record the round trip of the outstanding request.

    Responses that do not match the outstanding request are counted in
    `discarded` and otherwise ignored.
    """
    if st.outstanding is None or st.outstanding[0] != seq:
        st.discarded += 1
        return st
    _, sent_at = st.outstanding
    st.samples.append(ProbeSample(seq, SimTime(now - sent_at)))
    st.outstanding = None
    return st


AckHandler = Callable[[Packet], None]


class MeasurementServer:
    """Remote end of the test: acknowledges load, answers probes.

    Called by the upstream port at departure with the arrival time, it
    schedules the downstream reply on the fixed-delay return path. Bytes are
    also binned by arrival time for throughput accounting.
    """

    def __init__(self, sim: Simulator, link: LinkConfig, bin_width: SimTime) -> None:
        self._sim = sim
        self._link = link
        self._bin_width = bin_width
        self._senders: Dict[str, AckHandler] = {}
        self.arrived_bytes: List[int] = []

    def register(self, flow_id: str, on_reply: AckHandler) -> None:
        self._senders[flow_id] = on_reply

    def on_delivered(self, pkt: Packet, arrival: SimTime) -> None:
        index = arrival // self._bin_width
        if index >= len(self.arrived_bytes):
            self.arrived_bytes.extend([0] * (index + 1 - len(self.arrived_bytes)))
        self.arrived_bytes[index] += pkt.size_bytes

        on_reply = self._senders.get(pkt.flow_id)
        if on_reply is None:
            return
        reply_at = deliver_downstream(arrival, self._link)
        self._sim.schedule(reply_at, pkt.flow_id, "reply", on_reply, pkt)

    def bytes_between(self, start: SimTime, end: SimTime) -> int:
        """Bytes that arrived in the whole bins covering [start, end)."""
        first = start // self._bin_width
        last = -(-end // self._bin_width)
        return sum(self.arrived_bytes[first:last])


class BulkFlow:
    """One upstream AIMD load flow with unlimited data.

    Losses are learned one base RTT after the drop; there is no
    retransmission bookkeeping.
    """

    def __init__(
        self,
        sim: Simulator,
        flow_id: str,
        port: UpstreamPort,
        server: MeasurementServer,
        factory: PacketFactory,
        ssthresh_bytes: float,
        mss: int = MAX_PACKET_BYTES,
    ) -> None:
        self._sim = sim
        self.flow_id = flow_id
        self._port = port
        self._factory = factory
        self._link = port.link
        self.state = AimdState.initial(ssthresh_bytes, self._link.base_rtt, mss)
        self.running = False
        self.sent = 0
        self.acked = 0
        self.lost = 0
        server.register(flow_id, self._on_ack)

    def start(self) -> None:
        self.running = True
        self._pump()

    def stop(self) -> None:
        self.running = False

    def _pump(self) -> None:
        if not self.running:
            return
        allowed = aimd_can_send(self.state)
        mss = self.state.mss
        for _ in range(allowed // mss):
            pkt = self._factory.make(self.flow_id, PacketKind.BULK, mss)
            self.state = replace(
                self.state, inflight_bytes=self.state.inflight_bytes + mss
            )
            self.sent += 1
            result = self._port.send(pkt)
            if not result.accepted:
                self._sim.schedule_in(
                    self._link.base_rtt, self.flow_id, "loss", self._on_loss, pkt
                )

    def _on_ack(self, pkt: Packet) -> None:
        self.acked += 1
        self.state = aimd_on_rtt_sample(
            self.state, SimTime(self._sim.now - pkt.created_at)
        )
        self.state = aimd_on_ack(self.state, pkt.size_bytes)
        self._pump()

    def _on_loss(self, pkt: Packet) -> None:
        self.lost += 1
        self.state = aimd_on_loss(self.state, self._sim.now, pkt.size_bytes)
        self._pump()


class ConstantRateSource:
    """Fixed-size packets at a constant bit rate, no congestion control."""

    def __init__(
        self,
        sim: Simulator,
        flow_id: str,
        port: UpstreamPort,
        factory: PacketFactory,
        rate_bps: int,
        size_bytes: int = MAX_PACKET_BYTES,
    ) -> None:
        self._sim = sim
        self.flow_id = flow_id
        self._port = port
        self._factory = factory
        self._interval = serialize_time(size_bytes, rate_bps)
        self._size = size_bytes
        self._next: Optional[Event] = None
        self.sent = 0

    def start(self) -> None:
        self._emit()

    def stop(self) -> None:
        if self._next is not None:
            self._next.cancel()
            self._next = None

    def _emit(self) -> None:
        self.sent += 1
        self._port.send(self._factory.make(self.flow_id, PacketKind.CROSS, self._size))
        self._next = self._sim.schedule_in(
            self._interval, self.flow_id, "emit", self._emit
        )


class ProbeClient:
    """Closed-loop UDP_RR: a new request right after each response.

    Requests are issued only before `stop_at`; once the last exchange
    completes (answered or censored), `on_finished` is called with the time.
    """

    def __init__(
        self,
        sim: Simulator,
        port: UpstreamPort,
        server: MeasurementServer,
        factory: PacketFactory,
        timeout: SimTime = PROBE_TIMEOUT,
        size_bytes: int = MIN_PACKET_BYTES,
        flow_id: str = "probe",
    ) -> None:
        self._sim = sim
        self._port = port
        self._factory = factory
        self._size = size_bytes
        self.flow_id = flow_id
        self.state = ProbeState(timeout=timeout)
        self.first_sent_at: Optional[SimTime] = None
        self.finished_at: Optional[SimTime] = None
        self._stop_at: SimTime = SimTime(0)
        self._on_finished: Optional[Callable[[SimTime], None]] = None
        self._timer: Optional[Event] = None
        server.register(flow_id, self._on_response)

    def start(self, stop_at: SimTime, on_finished: Callable[[SimTime], None]) -> None:
        self._stop_at = stop_at
        self._on_finished = on_finished
        self._tick()

    def _tick(self) -> None:
        now = self._sim.now
        if now >= self._stop_at:
            if self.state.outstanding is None or probe_expire(self.state, now):
                self._finish()
            return
        pkt = probe_tick(self.state, now, self._factory, self.flow_id, self._size)
        if pkt is None:
            return
        if self.first_sent_at is None:
            self.first_sent_at = now
        if self._timer is not None:
            self._timer.cancel()
        self._timer = self._sim.schedule_in(
            self.state.timeout, self.flow_id, "timeout", self._tick
        )
        self._port.send(pkt)

    def _on_response(self, pkt: Packet) -> None:
        probe_on_response(self.state, pkt.seq, self._sim.now)
        if self.state.outstanding is None:
            self._tick()

    def _finish(self) -> None:
        if self.finished_at is not None:
            return
        if self._timer is not None:
            self._timer.cancel()
        self.finished_at = self._sim.now
        if self._on_finished is not None:
            self._on_finished(self._sim.now)
