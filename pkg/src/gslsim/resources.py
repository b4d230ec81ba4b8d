"""Contended transfer channels and memory ledgers.

A Channel models one data-loading path (the per-node host-load path or one
GPU's PCIe link) as an equal-share fluid: N concurrent transfers each
progress at bandwidth/N. Byte quantities are fixed point (micro-MB) and the
fluid state advances in integer virtual-time quanta with an explicit carry,
so completion instants and delivered-byte totals are deterministic, and
work conservation holds to well under the 1e-6 MB accounting tolerance.

A MemoryLedger tracks capacity-checked allocations with a configurable
rounding granularity (1024 MB for instance-fixed scheduling, exact
otherwise).
"""

from __future__ import annotations

import heapq
import itertools
from enum import Enum
from fractions import Fraction
from typing import Callable, Optional

from .engine import Engine, Event, EventKind, SimulationError

UMB_PER_MB = 1_000_000  # fixed-point scale: 1 micro-MB = 1e-6 MB


def mb_to_umb(mb: float) -> int:
    return int(round(mb * UMB_PER_MB))


def umb_to_mb(umb) -> float:
    return float(umb) / UMB_PER_MB


def round_up_umb(size_umb: int, granularity_umb: int) -> int:
    """Least multiple of the granularity >= size (0 granularity = exact)."""
    if granularity_umb <= 0:
        return size_umb
    return -((-size_umb) // granularity_umb) * granularity_umb


VQ_PER_UMB = 10**12  # virtual-time quanta per micro-MB


class Transfer:
    """One in-flight (or finished) transfer on a channel.

    remaining bytes are derived from the channel's virtual-time accumulator:
    a transfer joining at virtual time v with size s finishes exactly when
    the accumulator reaches v + s. Virtual time is integer quanta of
    1e-12 micro-MB, so the bookkeeping is pure integer arithmetic.
    """

    __slots__ = ("id", "owner", "size_umb", "v_join", "v_target", "joined_at",
                 "channel", "on_complete", "done", "completed_at")

    def __init__(self, tid, owner, size_umb, v_join, joined_at, channel, on_complete):
        self.id = tid
        self.owner = owner
        self.size_umb = size_umb
        self.v_join = v_join
        self.v_target = v_join + size_umb * VQ_PER_UMB
        self.joined_at = joined_at
        self.channel = channel
        self.on_complete = on_complete
        self.done = False
        self.completed_at: Optional[int] = None

    @property
    def bytes_total_umb(self) -> int:
        return self.size_umb

    @property
    def bytes_remaining(self) -> Fraction:
        if self.done:
            return Fraction(0)
        rem = self.v_target - self.channel._v
        return Fraction(rem, VQ_PER_UMB) if rem > 0 else Fraction(0)


class Channel:
    """Equal-share fluid processor-sharing transfer medium.

    One completion event is pending per channel at any time (for the
    earliest finisher); every membership change cancels and reschedules it,
    which is observably identical to rescheduling every transfer but keeps
    joins/leaves at O(log n).

    The per-share accumulator advances in integer quanta. An interval's
    byte budget that does not divide evenly among the members is carried
    into the next interval instead of being rounded away, so the model
    under-delivers by at most a few quanta (1e-18 MB each) at any instant
    and is exact whenever completions line up with interval boundaries.
    """

    def __init__(self, engine: Engine, name: str, bandwidth_mbps: float):
        if bandwidth_mbps <= 0:
            raise ValueError(f"channel {name}: bandwidth must be positive")
        self.engine = engine
        self.name = name
        self.bandwidth_mbps = bandwidth_mbps
        bw = Fraction(bandwidth_mbps)  # MB/s == micro-MB/us, numerically
        self._bw_num = bw.numerator * VQ_PER_UMB  # quanta per us, as a ratio
        self._bw_den = bw.denominator
        self._v = 0                    # per-share service so far, quanta
        self._carry = 0                # quanta earned but not yet distributed
        self._rem = 0                  # sub-quantum remainder, < _bw_den
        self._cursor = 0               # int us
        self._heap: list[tuple[int, int, Transfer]] = []
        self._n = 0
        self._event: Optional[Event] = None
        self._ids = itertools.count()
        self._pending_done: list[Transfer] = []
        self._busy_us = 0              # whole busy intervals
        self._busy_frac = Fraction(0)  # rational tail from mid-interval drains
        self.delivered_completed_umb = 0
        self.transfer_count = 0

    @property
    def active_count(self) -> int:
        return self._n

    @property
    def busy_time_us(self) -> Fraction:
        return self._busy_us + self._busy_frac

    @property
    def delivered_total_umb(self) -> Fraction:
        """Bytes the channel has pushed so far (completed + in flight)."""
        total = self.delivered_completed_umb * VQ_PER_UMB
        for _, _, t in self._heap:
            if not t.done:
                total += self._v - t.v_join
        return Fraction(total, VQ_PER_UMB)

    def begin_transfer(self, size_umb: int, owner=None,
                       on_complete: Optional[Callable[["Transfer", int], None]] = None) -> Transfer:
        if size_umb <= 0:
            raise ValueError(f"channel {self.name}: transfer size must be > 0")
        now = self.engine.now
        self._update(now)
        self._flush(now)
        t = Transfer(next(self._ids), owner, size_umb, self._v, now, self, on_complete)
        heapq.heappush(self._heap, (t.v_target, t.id, t))
        self._n += 1
        self.transfer_count += 1
        self._reschedule()
        return t

    def estimated_completion_us(self, t: Transfer) -> Fraction:
        """Completion instant of `t` under the current membership."""
        if t.done:
            return Fraction(t.completed_at)
        need = (t.v_target - self._v) * self._n - self._carry
        return self._cursor + Fraction(need * self._bw_den, self._bw_num)

    def _update(self, now: int) -> None:
        # Advance the fluid to `now`, handling completions that fall strictly
        # inside the interval so the speed-up of the survivors loses no
        # bytes. The walk is in work space: the interval's byte budget is
        # spent on per-share segments, never on rational time instants.
        cur = self._cursor
        if now <= cur:
            return
        self._cursor = now
        if not self._n:
            return
        heap = self._heap
        duration = now - cur
        total = self._bw_num * duration + self._rem
        budget0 = total // self._bw_den + self._carry
        budget = budget0
        self._rem = total % self._bw_den
        self._carry = 0
        while self._n and budget > 0:
            n = self._n
            need = (heap[0][0] - self._v) * n
            if need <= budget:
                budget -= need
                self._v = heap[0][0]
                while heap and heap[0][0] == self._v:
                    _, _, t = heapq.heappop(heap)
                    t.done = True
                    self._n -= 1
                    self.delivered_completed_umb += t.size_umb
                    self._pending_done.append(t)
            else:
                self._v += budget // n
                self._carry = budget % n
                budget = 0
        if self._n:
            self._busy_us += duration
        else:
            # drained inside the interval: busy only while budget was consumed
            self._busy_frac += Fraction((budget0 - budget) * self._bw_den, self._bw_num)
            self._rem = 0
            self._carry = 0

    def _flush(self, now: int) -> None:
        while self._pending_done:
            t = self._pending_done.pop(0)
            t.completed_at = now
            if t.on_complete is not None:
                t.on_complete(t, now)

    def _reschedule(self) -> None:
        if self._event is not None:
            self.engine.cancel(self._event)
            self._event = None
        if self._n:
            need = (self._heap[0][0] - self._v) * self._n - self._carry
            num = need * self._bw_den - self._rem
            when = self._cursor + -((-num) // self._bw_num)
            if when < self.engine.now:
                when = self.engine.now
            self._event = self.engine.schedule(
                when, EventKind.TRANSFER_COMPLETE, self._on_event, self.name)

    def _on_event(self, _payload) -> None:
        now = self.engine.now
        self._event = None
        self._update(now)
        if not self._pending_done:
            raise SimulationError(f"channel {self.name}: completion event with no finisher")
        self._flush(now)
        self._reschedule()

    def in_flight_remaining_umb(self) -> Fraction:
        total = Fraction(0)
        for _, _, t in self._heap:
            if not t.done:
                total += t.bytes_remaining
        return total


class AllocClass(Enum):
    CONTEXT = "context"
    READ_ONLY = "read_only"
    WRITABLE = "writable"
    INSTANCE_FIXED = "instance_fixed"


class Denied:
    """Allocation refusal carrying the shortfall; a value, not an error."""

    __slots__ = ("shortfall_umb",)

    def __init__(self, shortfall_umb: int):
        self.shortfall_umb = shortfall_umb

    @property
    def shortfall_mb(self) -> float:
        return umb_to_mb(self.shortfall_umb)

    def __repr__(self):
        return f"Denied(shortfall={self.shortfall_mb:.3f} MB)"


class Allocation:
    __slots__ = ("id", "requested_umb", "effective_umb", "cls", "owner")

    def __init__(self, aid, requested_umb, effective_umb, cls, owner):
        self.id = aid
        self.requested_umb = requested_umb
        self.effective_umb = effective_umb
        self.cls = cls
        self.owner = owner


class MemoryLedger:
    """Capacity-checked allocation table for one GPU (or the host).

    capacity_mb=None means unlimited (the host side). Requested sizes are
    rounded up to the configured granularity; usage accounting is in
    effective (post-rounding) bytes.
    """

    def __init__(self, name: str, capacity_mb: Optional[float] = None,
                 granularity_mb: float = 0.0,
                 on_change: Optional[Callable[[], None]] = None):
        self.name = name
        self.capacity_umb = None if capacity_mb is None else mb_to_umb(capacity_mb)
        self.granularity_umb = mb_to_umb(granularity_mb) if granularity_mb else 0
        self.on_change = on_change
        self._allocs: dict[int, Allocation] = {}
        self._ids = itertools.count()
        self._usage_umb = 0
        self._usage_by_class = {c: 0 for c in AllocClass}

    @property
    def usage_umb(self) -> int:
        return self._usage_umb

    @property
    def free_umb(self) -> Optional[int]:
        if self.capacity_umb is None:
            return None
        return self.capacity_umb - self._usage_umb

    def effective_umb(self, size_umb: int) -> int:
        return round_up_umb(size_umb, self.granularity_umb)

    def fits(self, size_umb: int) -> bool:
        if self.capacity_umb is None:
            return True
        return self.effective_umb(size_umb) <= self.capacity_umb - self._usage_umb

    def try_alloc(self, size_umb: int, cls: AllocClass, owner=None):
        """Allocate, or return Denied carrying the shortfall."""
        if size_umb <= 0:
            raise SimulationError(f"ledger {self.name}: allocation size must be > 0")
        eff = self.effective_umb(size_umb)
        if self.capacity_umb is not None and eff > self.capacity_umb - self._usage_umb:
            return Denied(eff - (self.capacity_umb - self._usage_umb))
        alloc = Allocation(next(self._ids), size_umb, eff, cls, owner)
        self._allocs[alloc.id] = alloc
        self._usage_umb += eff
        self._usage_by_class[cls] += eff
        if self.on_change:
            self.on_change()
        return alloc

    def free(self, alloc: Allocation) -> None:
        if self._allocs.get(alloc.id) is not alloc:
            raise SimulationError(f"ledger {self.name}: double or unknown free (id={alloc.id})")
        del self._allocs[alloc.id]
        self._usage_umb -= alloc.effective_umb
        self._usage_by_class[alloc.cls] -= alloc.effective_umb
        if self.on_change:
            self.on_change()

    def usage_by_class(self) -> dict[AllocClass, int]:
        return dict(self._usage_by_class)

    def allocations(self) -> list[Allocation]:
        return list(self._allocs.values())
