# SPDX-FileCopyrightText: Magenta ApS
#
# SPDX-License-Identifier: MPL-2.0
"""The access path: rate shaper, media access delay and propagation.

Only the upstream direction is congested. Downstream traffic (ACKs and probe
responses) crosses a fixed delay of half the base RTT.
"""
import math
from collections import Counter
from dataclasses import dataclass
from dataclasses import field
from enum import Enum
from itertools import count
from typing import Callable
from typing import Counter as tCounter
from typing import Iterator
from typing import Optional
from typing import Tuple
from typing import TYPE_CHECKING

from upstream_aqm_sim.sim_core import milliseconds
from upstream_aqm_sim.sim_core import NANOS_PER_SECOND
from upstream_aqm_sim.sim_core import SimTime
from upstream_aqm_sim.sim_core import SimulationFault
from upstream_aqm_sim.sim_core import Simulator

if TYPE_CHECKING:  # pragma: no cover
    from upstream_aqm_sim.qdisc import EnqueueResult
    from upstream_aqm_sim.qdisc import QueueDiscipline

MIN_PACKET_BYTES = 64
MAX_PACKET_BYTES = 1500


class PacketKind(str, Enum):
    """What a packet carries."""

    BULK = "bulk"
    """Load traffic of the throughput measurement."""

    PROBE_REQUEST = "probe_request"
    """Upstream half of a UDP request/response exchange."""

    PROBE_RESPONSE = "probe_response"
    """Downstream half of a UDP request/response exchange."""

    CROSS = "cross"
    """Constant-rate background traffic."""


@dataclass
class Packet:
    """Unit of transfer. `size_bytes` includes all header overhead."""

    id: int
    flow_id: str
    kind: PacketKind
    size_bytes: int
    created_at: SimTime
    enqueued_at: Optional[SimTime] = None
    seq: int = 0

    def __post_init__(self) -> None:
        if not MIN_PACKET_BYTES <= self.size_bytes <= MAX_PACKET_BYTES:
            raise ValueError(
                f"Packet size {self.size_bytes} outside "
                f"[{MIN_PACKET_BYTES}, {MAX_PACKET_BYTES}]"
            )

    def mark_enqueued(self, now: SimTime) -> None:
        if self.enqueued_at is not None:
            raise SimulationFault(f"Packet {self.id} admitted to a queue twice")
        self.enqueued_at = now


class PacketFactory:
    """Hands out packets with simulation-unique ids."""

    def __init__(self, sim: Simulator) -> None:
        self._sim = sim
        self._ids: Iterator[int] = count()

    def make(
        self, flow_id: str, kind: PacketKind, size_bytes: int, seq: int = 0
    ) -> Packet:
        return Packet(
            id=next(self._ids),
            flow_id=flow_id,
            kind=kind,
            size_bytes=size_bytes,
            created_at=self._sim.now,
            seq=seq,
        )


@dataclass(frozen=True)
class LinkConfig:
    """The provisioned upstream of one device."""

    rate_bps: int = 10_000_000
    """Shaped maximum sustained rate."""

    bucket_bytes: int = 16 * MAX_PACKET_BYTES
    """Shaper burst depth."""

    mac_access_delay: SimTime = milliseconds(2)
    """Constant stand-in for the DOCSIS request-grant cycle."""

    base_rtt: SimTime = milliseconds(10)
    """Round-trip propagation plus remote turnaround, without queueing."""

    def __post_init__(self) -> None:
        if self.rate_bps <= 0:
            raise ValueError("rate_bps must be positive")
        if self.bucket_bytes < MAX_PACKET_BYTES:
            raise ValueError(f"bucket_bytes must be at least {MAX_PACKET_BYTES}")
        if self.base_rtt < 0 or self.mac_access_delay < 0:
            raise ValueError("Delays must not be negative")


@dataclass(frozen=True)
class ShaperState:
    tokens_bytes: float
    last_refill: SimTime

    @classmethod
    def full(cls, link: LinkConfig) -> "ShaperState":
        return cls(tokens_bytes=float(link.bucket_bytes), last_refill=SimTime(0))


def serialize_time(size_bytes: int, rate_bps: int) -> SimTime:
    """Time to clock `size_bytes` onto a `rate_bps` link, rounded up to 1 ns."""
    if rate_bps <= 0:
        raise ValueError("rate_bps must be positive")
    return SimTime(-(-size_bytes * 8 * NANOS_PER_SECOND // rate_bps))


def _accrued(st: ShaperState, until: SimTime, link: LinkConfig) -> float:
    elapsed = until - st.last_refill
    return min(
        float(link.bucket_bytes),
        st.tokens_bytes + elapsed * link.rate_bps / (8 * NANOS_PER_SECOND),
    )


def shaper_next_departure(
    st: ShaperState, pkt: Packet, now: SimTime, link: LinkConfig
) -> Tuple[SimTime, ShaperState]:
    """Earliest time the head packet finishes transmission.

    Serialization at `rate_bps` overlaps token accrual: the packet finishes at
    the later of `now + serialize_time` and the moment the bucket holds
    `size_bytes` tokens. Tokens are debited at departure.

    Args:
        st: Shaper state before the transmission.
        pkt: The head packet.
        now: Transmission start.
        link: The shaped link.

    Raises:
        SimulationFault: If the packet can never fit the bucket.

    Returns:
        * SimTime: Departure time.
        * ShaperState: State after the debit.
    """
    if pkt.size_bytes > link.bucket_bytes:
        raise SimulationFault(
            f"Packet of {pkt.size_bytes} B exceeds the {link.bucket_bytes} B bucket"
        )
    tokens = _accrued(st, now, link)
    departure = SimTime(now + serialize_time(pkt.size_bytes, link.rate_bps))
    deficit = pkt.size_bytes - tokens
    if deficit > 0:
        ready = now + math.ceil(deficit * 8 * NANOS_PER_SECOND / link.rate_bps)
        departure = SimTime(max(departure, ready))
    refilled = ShaperState(tokens, now)
    left = max(0.0, _accrued(refilled, departure, link) - pkt.size_bytes)
    return departure, ShaperState(left, departure)


def deliver_upstream(departure: SimTime, link: LinkConfig) -> SimTime:
    """Arrival at the remote endpoint of a packet leaving the shaper."""
    return SimTime(departure + link.mac_access_delay + link.base_rtt // 2)


def deliver_downstream(sent_at: SimTime, link: LinkConfig) -> SimTime:
    """Arrival at the client of a packet sent by the remote endpoint.

    Together with `deliver_upstream` this adds up to exactly `base_rtt`.
    """
    return SimTime(sent_at + link.base_rtt - link.base_rtt // 2)


DeliveryHandler = Callable[[Packet, SimTime], None]


@dataclass
class PortCounters:
    accepted: tCounter[str] = field(default_factory=Counter)
    dropped: tCounter[str] = field(default_factory=Counter)
    departed: tCounter[str] = field(default_factory=Counter)
    bytes_departed: int = 0


class UpstreamPort:
    """The cable modem upstream: a queue discipline feeding the shaper.

    The port is work conserving: whenever the queue holds a packet and the
    transmitter is idle, the head packet starts transmission. Departing
    packets are handed to `on_delivered` at departure time together with
    their arrival time at the remote endpoint.
    """

    def __init__(
        self,
        sim: Simulator,
        link: LinkConfig,
        qdisc: "QueueDiscipline",
        on_delivered: DeliveryHandler,
    ) -> None:
        self._sim = sim
        self.link = link
        self.qdisc = qdisc
        self._on_delivered = on_delivered
        self._shaper = ShaperState.full(link)
        self.in_service: Optional[Packet] = None
        self.counters = PortCounters()

    def send(self, pkt: Packet) -> "EnqueueResult":
        """Offer a packet to the queue; starts transmission when idle."""
        result = self.qdisc.enqueue(pkt, self._sim.now)
        if result.accepted:
            self.counters.accepted[pkt.flow_id] += 1
            if self.in_service is None:
                self._start_next()
        else:
            self.counters.dropped[pkt.flow_id] += 1
        return result

    def queued(self, flow_id: str) -> int:
        return sum(1 for pkt in self.qdisc.packets() if pkt.flow_id == flow_id)

    def _start_next(self) -> None:
        pkt = self.qdisc.dequeue(self._sim.now)
        if pkt is None:
            return
        self.in_service = pkt
        departure, self._shaper = shaper_next_departure(
            self._shaper, pkt, self._sim.now, self.link
        )
        self._sim.schedule(departure, "upstream", "departure", self._on_departure)

    def _on_departure(self) -> None:
        pkt = self.in_service
        if pkt is None:
            raise SimulationFault("Departure without a packet in service")
        self.in_service = None
        self.counters.departed[pkt.flow_id] += 1
        self.counters.bytes_departed += pkt.size_bytes
        self._on_delivered(pkt, deliver_upstream(self._sim.now, self.link))
        self._start_next()
