# SPDX-FileCopyrightText: Magenta ApS
#
# SPDX-License-Identifier: MPL-2.0
"""The two upstream queue disciplines under comparison.

* Tail-drop FIFO sized by DOCSIS 3.0 buffer control.
* DOCSIS-PIE active queue management.

The state-transition functions (`fifo_enqueue`, `pie_update`, ...) are the
model; `BufferControlFifo` and `DocsisPie` wire them into a simulation.
"""
import logging
from abc import ABC
from abc import abstractmethod
from collections import deque
from dataclasses import dataclass
from dataclasses import field
from dataclasses import replace
from enum import Enum
from typing import Deque
from typing import Iterable
from typing import List
from typing import Optional
from typing import Tuple
from typing import Union

from upstream_aqm_sim.netmodel import LinkConfig
from upstream_aqm_sim.netmodel import MAX_PACKET_BYTES
from upstream_aqm_sim.netmodel import Packet
from upstream_aqm_sim.sim_core import milliseconds
from upstream_aqm_sim.sim_core import NANOS_PER_SECOND
from upstream_aqm_sim.sim_core import RngStream
from upstream_aqm_sim.sim_core import seconds
from upstream_aqm_sim.sim_core import SimTime
from upstream_aqm_sim.sim_core import Simulator

logger = logging.getLogger(__name__)

BUFFER_CONTROL_DELAY = milliseconds(250)


class Discipline(str, Enum):
    """Enumeration of upstream queue disciplines."""

    BUFFER_CONTROL_FIFO = "buffer_control_fifo"
    """Tail-drop FIFO whose size drains in a fixed delay.

    This is the pre-AQM DOCSIS 3.0 configuration, found on the TG3482G
    gateway variant.
    """

    DOCSIS_PIE = "docsis_pie"
    """The DOCSIS 3.1 PIE active queue manager (CGM4140COM variant)."""

    @property
    def device_model(self) -> str:
        return DEVICE_MODELS[self]


DEVICE_MODELS = {
    Discipline.BUFFER_CONTROL_FIFO: "TG3482G",
    Discipline.DOCSIS_PIE: "CGM4140COM",
}


class EnqueueResult(str, Enum):
    ACCEPTED = "accepted"
    DROPPED_TAIL = "dropped_tail"
    DROPPED_EARLY = "dropped_early"
    DROPPED_OVERFLOW = "dropped_overflow"

    @property
    def accepted(self) -> bool:
        return self is EnqueueResult.ACCEPTED


def buffer_control_limit(rate_bps: int, target_delay: SimTime) -> int:
    """Bytes of static buffer that drain in `target_delay` at `rate_bps`.

    The result never goes below one full-size packet.

    Args:
        rate_bps: Shaped egress rate.
        target_delay: Drain time of a full buffer.

    Raises:
        ValueError: If `rate_bps` is not positive.

    Returns:
        Buffer limit in bytes.
    """
    if rate_bps <= 0:
        raise ValueError("rate_bps must be positive")
    limit = -(-rate_bps * target_delay // (8 * NANOS_PER_SECOND))
    return max(limit, MAX_PACKET_BYTES)


@dataclass
class FifoState:
    limit_bytes: int
    backlog_bytes: int = 0
    queue: Deque[Packet] = field(default_factory=deque)


def fifo_enqueue(st: FifoState, pkt: Packet, now: SimTime) -> EnqueueResult:
    """Admit `pkt` unless it would push the backlog past the limit."""
    if st.backlog_bytes + pkt.size_bytes > st.limit_bytes:
        return EnqueueResult.DROPPED_TAIL
    pkt.mark_enqueued(now)
    st.queue.append(pkt)
    st.backlog_bytes += pkt.size_bytes
    return EnqueueResult.ACCEPTED


@dataclass(frozen=True)
class PieParams:
    """DOCSIS-PIE controller parameters."""

    latency_target: SimTime = milliseconds(10)
    update_interval: SimTime = milliseconds(16)
    gain_a: float = 0.25
    """Proportional gain, per second of delay error."""
    gain_b: float = 2.5
    """Derivative gain, per second of delay change."""
    max_burst: SimTime = milliseconds(142)
    burst_reset: SimTime = seconds(1)
    mean_pktsize: int = 1024
    small_packet_bytes: int = 128
    """Packets up to this size are never dropped early; 0 disables this."""
    hard_limit_bytes: Optional[int] = None
    """Tail limit; `None` sizes it like a 250 ms buffer-control queue."""

    def __post_init__(self) -> None:
        positives = (
            self.latency_target,
            self.update_interval,
            self.gain_a,
            self.gain_b,
            self.max_burst,
            self.burst_reset,
            self.mean_pktsize,
        )
        if any(value <= 0 for value in positives):
            raise ValueError("PIE parameters must be positive")
        if self.hard_limit_bytes is not None and self.hard_limit_bytes <= 0:
            raise ValueError("PIE hard limit must be positive")
        if self.small_packet_bytes < 0:
            raise ValueError("small_packet_bytes must not be negative")
        if self.latency_target >= self.max_burst:
            raise ValueError("latency_target must be below max_burst")

    def resolve_hard_limit(self, rate_bps: int) -> int:
        if self.hard_limit_bytes is not None:
            return self.hard_limit_bytes
        return buffer_control_limit(rate_bps, BUFFER_CONTROL_DELAY)


@dataclass
class PieState:
    params: PieParams
    rate_bps: int
    hard_limit_bytes: int
    drop_prob: float = 0.0
    qdelay_cur: SimTime = SimTime(0)
    qdelay_old: SimTime = SimTime(0)
    burst_allowance: SimTime = SimTime(0)
    backlog_bytes: int = 0
    queue: Deque[Packet] = field(default_factory=deque)
    last_update: SimTime = SimTime(0)
    idle_since: Optional[SimTime] = None

    @classmethod
    def initial(cls, params: PieParams, rate_bps: int) -> "PieState":
        """Fresh controller; a newly started queue counts as idle."""
        return cls(
            params=params,
            rate_bps=rate_bps,
            hard_limit_bytes=params.resolve_hard_limit(rate_bps),
            burst_allowance=params.max_burst,
        )


def pie_qdelay(backlog_bytes: int, rate_bps: int) -> SimTime:
    """Queue delay estimate: backlog over the shaped egress rate."""
    if rate_bps <= 0:
        raise ValueError("rate_bps must be positive")
    return SimTime(backlog_bytes * 8 * NANOS_PER_SECOND // rate_bps)


# (upper bound of drop_prob, divisor) applied to the PI adjustment
_ADJUSTMENT_SCALE: Tuple[Tuple[float, int], ...] = (
    (0.000001, 2048),
    (0.00001, 512),
    (0.0001, 128),
    (0.001, 32),
    (0.01, 8),
    (0.1, 2),
)


def _scale_adjustment(p: float, adjustment: float) -> float:
    for bound, divisor in _ADJUSTMENT_SCALE:
        if p < bound:
            return adjustment / divisor
    return adjustment


def pie_update(st: PieState, now: SimTime) -> PieState:
    """Run one controller period.

    The drop probability moves by
    `A * (qdelay - target) + B * (qdelay - qdelay_old)`, scaled down while the
    probability is small. When both delay samples are zero the probability
    additionally decays by 2%. The burst allowance shrinks by one update
    interval, and is re-armed once the controller has been idle (zero
    probability, empty queue) for `burst_reset`.

    Args:
        st: Controller state; not modified.
        now: Current time.

    Raises:
        ValueError: If called before an update interval has elapsed.

    Returns:
        The next controller state.
    """
    params = st.params
    if now < st.last_update + params.update_interval:
        raise ValueError("pie_update called before the update interval elapsed")

    qdelay = pie_qdelay(st.backlog_bytes, st.rate_bps)
    qdelay_s = qdelay / NANOS_PER_SECOND
    qdelay_old_s = st.qdelay_old / NANOS_PER_SECOND
    target_s = params.latency_target / NANOS_PER_SECOND

    p = st.drop_prob
    adjustment = params.gain_a * (qdelay_s - target_s) + params.gain_b * (
        qdelay_s - qdelay_old_s
    )
    p = p + _scale_adjustment(p, adjustment)
    if qdelay == 0 and st.qdelay_old == 0:
        p = p * 0.98
    p = min(max(p, 0.0), 1.0)

    burst_allowance = st.burst_allowance
    if burst_allowance > 0:
        burst_allowance = SimTime(max(0, burst_allowance - params.update_interval))

    idle_since = st.idle_since
    if p == 0.0 and st.backlog_bytes == 0:
        if idle_since is None:
            idle_since = now
        elif now - idle_since >= params.burst_reset:
            burst_allowance = params.max_burst
    else:
        idle_since = None

    return replace(
        st,
        drop_prob=p,
        qdelay_cur=qdelay,
        qdelay_old=qdelay,
        burst_allowance=burst_allowance,
        last_update=now,
        idle_since=idle_since,
    )


def _early_drop_bypassed(st: PieState) -> bool:
    params = st.params
    if st.burst_allowance > 0:
        return True
    if st.drop_prob < 0.2 and st.qdelay_old < params.latency_target / 2:
        return True
    return st.backlog_bytes < 2 * params.mean_pktsize


def pie_enqueue(
    st: PieState, pkt: Packet, now: SimTime, rng: RngStream
) -> EnqueueResult:
    """Admit, early-drop or overflow-drop `pkt`.

    The early-drop probability is `drop_prob` scaled by the packet's size
    relative to `mean_pktsize`, capped at 1. A random draw is taken only when
    that probability is positive and no safeguard applies. Packets of at most
    `small_packet_bytes` skip early drop altogether.
    """
    if st.backlog_bytes + pkt.size_bytes > st.hard_limit_bytes:
        return EnqueueResult.DROPPED_OVERFLOW
    exempt = pkt.size_bytes <= st.params.small_packet_bytes
    if not exempt and not _early_drop_bypassed(st):
        drop_prob = min(1.0, st.drop_prob * pkt.size_bytes / st.params.mean_pktsize)
        if drop_prob > 0.0 and rng.random() < drop_prob:
            return EnqueueResult.DROPPED_EARLY
    pkt.mark_enqueued(now)
    st.queue.append(pkt)
    st.backlog_bytes += pkt.size_bytes
    return EnqueueResult.ACCEPTED


def qdisc_dequeue(st: Union[FifoState, PieState]) -> Optional[Packet]:
    """Remove and return the head packet, or `None` when empty."""
    if not st.queue:
        return None
    pkt = st.queue.popleft()
    st.backlog_bytes -= pkt.size_bytes
    return pkt


class QueueDiscipline(ABC):
    """A discipline bound to one simulation."""

    discipline: Discipline

    @abstractmethod
    def enqueue(self, pkt: Packet, now: SimTime) -> EnqueueResult:
        ...

    @abstractmethod
    def dequeue(self, now: SimTime) -> Optional[Packet]:
        ...

    @property
    @abstractmethod
    def backlog_bytes(self) -> int:
        ...

    @abstractmethod
    def packets(self) -> Iterable[Packet]:
        ...

    def attach(self, sim: Simulator) -> None:
        """Start any timers the discipline needs."""


class BufferControlFifo(QueueDiscipline):
    discipline = Discipline.BUFFER_CONTROL_FIFO

    def __init__(self, limit_bytes: int) -> None:
        self.state = FifoState(limit_bytes=limit_bytes)

    def enqueue(self, pkt: Packet, now: SimTime) -> EnqueueResult:
        return fifo_enqueue(self.state, pkt, now)

    def dequeue(self, now: SimTime) -> Optional[Packet]:
        return qdisc_dequeue(self.state)

    @property
    def backlog_bytes(self) -> int:
        return self.state.backlog_bytes

    def packets(self) -> Iterable[Packet]:
        return iter(self.state.queue)


class DocsisPie(QueueDiscipline):
    """PIE with a periodic controller update.

    Every update appends `(time, queue delay estimate)` to `qdelay_trace`.
    """

    discipline = Discipline.DOCSIS_PIE

    def __init__(self, params: PieParams, rate_bps: int, rng: RngStream) -> None:
        self.state = PieState.initial(params, rate_bps)
        self._rng = rng
        self._sim: Optional[Simulator] = None
        self.qdelay_trace: List[Tuple[SimTime, SimTime]] = []

    def attach(self, sim: Simulator) -> None:
        self._sim = sim
        self.state = replace(self.state, last_update=sim.now)
        sim.schedule_in(
            self.state.params.update_interval, "pie", "update", self._on_update
        )

    def _on_update(self) -> None:
        assert self._sim is not None
        now = self._sim.now
        self.state = pie_update(self.state, now)
        self.qdelay_trace.append((now, self.state.qdelay_cur))
        self._sim.schedule_in(
            self.state.params.update_interval, "pie", "update", self._on_update
        )

    def enqueue(self, pkt: Packet, now: SimTime) -> EnqueueResult:
        return pie_enqueue(self.state, pkt, now, self._rng)

    def dequeue(self, now: SimTime) -> Optional[Packet]:
        return qdisc_dequeue(self.state)

    @property
    def backlog_bytes(self) -> int:
        return self.state.backlog_bytes

    def packets(self) -> Iterable[Packet]:
        return iter(self.state.queue)


def make_discipline(
    discipline: Discipline,
    link: LinkConfig,
    buffer_delay: SimTime,
    pie_params: PieParams,
    rng: RngStream,
) -> QueueDiscipline:
    """Build the configured discipline for `link`."""
    if discipline is Discipline.BUFFER_CONTROL_FIFO:
        limit = buffer_control_limit(link.rate_bps, buffer_delay)
        logger.debug("Buffer control FIFO with %d B limit", limit)
        return BufferControlFifo(limit)
    return DocsisPie(pie_params, link.rate_bps, rng)
