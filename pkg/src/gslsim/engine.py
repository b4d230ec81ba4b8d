"""Deterministic discrete-event core.

All simulation time is kept as integer microseconds so that identical
configurations replay bit-for-bit on any platform. Events dispatch in
(time, seq) order; cancellation is a tombstone flag so that the frequent
reschedules of the processor-sharing channels stay O(log n).
"""

from __future__ import annotations

import heapq
from enum import Enum
from typing import Any, Callable, Optional

from numpy.random import Generator, PCG64, SeedSequence

US_PER_MS = 1_000
US_PER_S = 1_000_000

# named RNG stream ids; adding a consumer must not perturb existing streams
WORKLOAD_STREAM = 0
DISPATCH_STREAM = 1


class SimulationError(RuntimeError):
    """A broken invariant inside the simulation (always a logic bug)."""


class EventKind(Enum):
    ARRIVAL = "Arrival"
    TRANSFER_COMPLETE = "TransferComplete"
    STAGE_COMPLETE = "StageComplete"
    EXIT_TIMER = "ExitTimer"
    GENERATOR_TICK = "GeneratorTick"
    MEASUREMENT_TICK = "MeasurementTick"


def ms_to_us(ms: float) -> int:
    return int(round(ms * US_PER_MS))


def s_to_us(s: float) -> int:
    return int(round(s * US_PER_S))


def rng_stream(seed: int, stream_id: int) -> Generator:
    """Independent, platform-stable RNG stream.

    Same (seed, stream_id, draw index) always yields the same value; streams
    with different ids never overlap.
    """
    return Generator(PCG64(SeedSequence(entropy=seed, spawn_key=(stream_id,))))


class Event:
    __slots__ = ("time", "seq", "kind", "payload", "callback", "cancelled",
                 "dispatched", "engine")

    def __init__(self, time: int, seq: int, kind: EventKind,
                 callback: Callable[[Any], None], payload: Any, engine: "Engine"):
        self.time = time
        self.seq = seq
        self.kind = kind
        self.payload = payload
        self.callback = callback
        self.cancelled = False
        self.dispatched = False
        self.engine = engine

    def __repr__(self):
        return f"Event(t={self.time}, seq={self.seq}, kind={self.kind.value})"


class Engine:
    """Single-threaded event loop with an integer-microsecond clock.

    Not shareable between threads; run independent configurations in
    separate Engine instances instead.
    """

    def __init__(self, log_events: bool = False):
        self._now = 0
        self._seq = 0
        self._heap: list[tuple[int, int, Event]] = []
        self._log: Optional[list[str]] = [] if log_events else None
        self._live = 0  # scheduled and neither cancelled nor dispatched

    @property
    def now(self) -> int:
        return self._now

    def schedule(self, time: int, kind: EventKind,
                 callback: Callable[[Any], None], payload: Any = None) -> Event:
        if time < self._now:
            raise SimulationError(
                f"schedule into the past: t={time} < now={self._now} ({kind.value})")
        ev = Event(time, self._seq, kind, callback, payload, self)
        self._seq += 1
        heapq.heappush(self._heap, (ev.time, ev.seq, ev))
        self._live += 1
        return ev

    def cancel(self, handle: Event) -> bool:
        """Tombstone an event. True iff it had not yet dispatched."""
        if not isinstance(handle, Event) or handle.engine is not self:
            raise SimulationError(f"cancel of unknown event handle: {handle!r}")
        if handle.dispatched or handle.cancelled:
            return False
        handle.cancelled = True
        self._live -= 1
        return True

    def step(self) -> Optional[Event]:
        """Dispatch exactly one non-cancelled event, or None if drained."""
        while self._heap:
            _, _, ev = heapq.heappop(self._heap)
            if ev.cancelled:
                continue
            self._now = ev.time
            ev.dispatched = True
            self._live -= 1
            if self._log is not None:
                self._log.append(f"{ev.time} {ev.seq} {ev.kind.value}")
            ev.callback(ev.payload)
            return ev
        return None

    def run(self, until: Optional[int] = None) -> int:
        """Dispatch all events with time <= until (all of them if None).

        Returns the number of events dispatched. The clock ends at `until`
        when given, even if the queue drained earlier.
        """
        dispatched = 0
        while self._heap:
            time, _, ev = self._heap[0]
            if ev.cancelled:
                heapq.heappop(self._heap)
                continue
            if until is not None and time > until:
                break
            self.step()
            dispatched += 1
        if until is not None and until > self._now:
            self._now = until
        return dispatched

    def pending(self) -> int:
        return self._live

    @property
    def event_log(self) -> list[str]:
        if self._log is None:
            raise SimulationError("event log not enabled for this engine")
        return self._log
