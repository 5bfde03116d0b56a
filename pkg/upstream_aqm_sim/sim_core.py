# SPDX-FileCopyrightText: Magenta ApS
#
# SPDX-License-Identifier: MPL-2.0
"""Deterministic discrete-event engine.

Time is an integer number of nanoseconds (`SimTime`) on a simpy clock. Events
due at the same instant fire in scheduling order, so two runs of the same
configuration dispatch exactly the same sequence.

Example:
    ```Python
    from upstream_aqm_sim.sim_core import Simulator, milliseconds

    sim = Simulator(seed=7)
    sim.schedule(milliseconds(5), "demo", "hello", print, "fired")
    sim.run_until(milliseconds(10))
    ```
"""
import hashlib
from dataclasses import dataclass
from dataclasses import field
from functools import partial
from typing import Any
from typing import Callable
from typing import Dict
from typing import NewType
from typing import Set
from typing import Tuple

import numpy as np
import simpy

SimTime = NewType("SimTime", int)

NANOS_PER_MICROSECOND = 1_000
NANOS_PER_MILLISECOND = 1_000_000
NANOS_PER_SECOND = 1_000_000_000


def microseconds(value: float) -> SimTime:
    return SimTime(round(value * NANOS_PER_MICROSECOND))


def milliseconds(value: float) -> SimTime:
    return SimTime(round(value * NANOS_PER_MILLISECOND))


def seconds(value: float) -> SimTime:
    return SimTime(round(value * NANOS_PER_SECOND))


def to_milliseconds(t: float) -> float:
    return t / NANOS_PER_MILLISECOND


class SimulationFault(RuntimeError):
    """An internal invariant of the simulation was violated.

    This signals a bug in the model, never bad user input.
    """


@dataclass(eq=False)
class Event:
    """A scheduled action; compared by identity."""

    fire_at: SimTime
    target: str
    kind: str
    action: Callable[..., None] = field(repr=False)
    args: Tuple[Any, ...] = field(default=(), repr=False)
    cancelled: bool = False

    def cancel(self) -> None:
        """Prevent the event from being dispatched."""
        self.cancelled = True


class RngStream:
    """Counter-based random stream keyed by `(seed, stream_id)`.

    Backed by numpy's Philox generator, so the n-th draw of a stream is the
    same on every run and platform, and draws on one stream never move
    another.
    """

    def __init__(self, seed: int, stream_id: str) -> None:
        self.seed = seed
        self.stream_id = stream_id
        self.draws = 0
        self._generator = np.random.Generator(
            np.random.Philox(key=stream_key(seed, stream_id))
        )

    def random(self) -> float:
        """Draw from [0, 1)."""
        self.draws += 1
        return float(self._generator.random())

    def integers(self, low: int, high: int) -> int:
        """Draw an integer from [low, high)."""
        self.draws += 1
        return int(self._generator.integers(low, high))


def stream_key(seed: int, stream_id: str) -> int:
    """Derive the 128-bit Philox key of a stream."""
    digest = hashlib.blake2b(
        f"{seed}:{stream_id}".encode("utf-8"), digest_size=16
    ).digest()
    return int.from_bytes(digest, "big")


def rng_uniform(stream: RngStream, lo: float, hi: float) -> float:
    """Draw uniformly from [lo, hi).

    One draw is consumed even for a degenerate interval, so the draw index of
    a stream does not depend on the arguments.

    Args:
        stream: The stream to draw from.
        lo: Lower bound, inclusive.
        hi: Upper bound, exclusive (returned only when `lo == hi`).

    Raises:
        ValueError: If `lo > hi`.

    Returns:
        The drawn value.
    """
    if lo > hi:
        raise ValueError(f"Empty interval [{lo}, {hi})")
    u = stream.random()
    if lo == hi:
        return lo
    value = lo + (hi - lo) * u
    if value >= hi:
        value = float(np.nextafter(hi, lo))
    return value


class Simulator:
    """Single-threaded event loop over integer-nanosecond time.

    Built on a `simpy.Environment` whose clock counts nanoseconds. simpy
    orders its queue by `(time, priority, insertion id)` and every event here
    is scheduled at the same priority, so events due at the same instant fire
    in scheduling order.

    A simulator owns its clock, environment and random streams; nothing is
    shared between instances, so separate instances may run on separate
    threads or processes.
    """

    def __init__(self, seed: int = 0) -> None:
        self.seed = seed
        self.env = simpy.Environment(initial_time=0)
        self._scheduled: Set[Event] = set()
        self._streams: Dict[str, RngStream] = {}
        self._stopped = False
        self.dispatched = 0

    @property
    def now(self) -> SimTime:
        return SimTime(int(self.env.now))

    @property
    def pending(self) -> int:
        return sum(1 for event in self._scheduled if not event.cancelled)

    def schedule(
        self,
        fire_at: SimTime,
        target: str,
        kind: str,
        action: Callable[..., None],
        *args: Any,
    ) -> Event:
        """Schedule `action(*args)` at `fire_at`.

        Args:
            fire_at: Absolute dispatch time.
            target: Identifier of the actor the event is addressed to.
            kind: Event kind, for tracing.
            action: Callable invoked on dispatch.
            args: Positional arguments for `action`.

        Raises:
            SimulationFault: If `fire_at` lies in the past.

        Returns:
            The scheduled event, which doubles as its cancellation handle.
        """
        now = self.now
        if fire_at < now:
            raise SimulationFault(
                f"{target}/{kind} scheduled at {fire_at}ns, clock is at {now}ns"
            )
        event = Event(SimTime(int(fire_at)), target, kind, action, args)
        timeout = self.env.timeout(event.fire_at - now)
        timeout.callbacks.append(partial(self._dispatch, event))
        self._scheduled.add(event)
        return event

    def schedule_in(
        self,
        delay: SimTime,
        target: str,
        kind: str,
        action: Callable[..., None],
        *args: Any,
    ) -> Event:
        return self.schedule(SimTime(self.now + delay), target, kind, action, *args)

    def _dispatch(self, event: Event, _: simpy.Event) -> None:
        self._scheduled.discard(event)
        if event.cancelled:
            return
        self.dispatched += 1
        event.action(*event.args)

    def stop(self) -> None:
        """Make the running `run_until` return after the current event."""
        self._stopped = True

    def run_until(self, t_end: SimTime) -> SimTime:
        """Dispatch every event with `fire_at <= t_end`.

        Events scheduled during dispatch are dispatched too when they fall
        inside the horizon. Without a `stop()` the clock ends at `t_end`.

        Returns:
            The final clock value.
        """
        self._stopped = False
        if t_end > self.now:
            # Bare timeout that carries the clock to the horizon
            self.env.timeout(t_end - self.now)
        while self.env.peek() <= t_end:
            self.env.step()
            if self._stopped:
                break
        return self.now

    def rng(self, stream_id: str) -> RngStream:
        """Return the stream `stream_id` of this simulation's seed."""
        stream = self._streams.get(stream_id)
        if stream is None:
            stream = RngStream(self.seed, stream_id)
            self._streams[stream_id] = stream
        return stream
