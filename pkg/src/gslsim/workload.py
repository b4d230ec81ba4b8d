"""Invocation sources: Poisson open-loop, closed-loop, trace replay, and
the peak-throughput search driver."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Optional

from .engine import (US_PER_MS, US_PER_S, WORKLOAD_STREAM, EventKind,
                     rng_stream)


@dataclass(frozen=True)
class ArrivalRecord:
    timestamp_us: int
    function: str

    @property
    def timestamp_ms(self) -> float:
        return self.timestamp_us / US_PER_MS


class TraceParseError(ValueError):
    pass


def _normalize_mix(mix: dict[str, float]) -> list[tuple[str, float]]:
    if not mix:
        raise ValueError("function mix must not be empty")
    total = sum(mix.values())
    if total <= 0 or any(w <= 0 for w in mix.values()):
        raise ValueError("function mix weights must be positive")
    return [(name, w / total) for name, w in sorted(mix.items())]


@dataclass(frozen=True)
class PoissonOpenSpec:
    rate_per_s: float
    duration_s: float
    mix: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.rate_per_s < 0 or self.duration_s <= 0:
            raise ValueError("Poisson source needs rate >= 0 and duration > 0")


@dataclass(frozen=True)
class ClosedLoopSpec:
    concurrency: int
    count: int
    mix: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.concurrency < 1 or self.count < 0:
            raise ValueError("closed loop needs concurrency >= 1 and count >= 0")


@dataclass(frozen=True)
class TraceSpec:
    path: str
    time_scale: float = 1.0

    def __post_init__(self):
        if self.time_scale <= 0:
            raise ValueError("trace time_scale must be positive")


@dataclass(frozen=True)
class SequenceSpec:
    """Explicit (timestamp_ms, function) pairs; handy for staged probes."""
    arrivals: tuple


def generate_arrivals(spec, seed: int, known_functions=None) -> list[ArrivalRecord]:
    """Materialize an open-loop arrival stream (Poisson / trace / sequence).

    The stream depends only on (spec, seed), never on simulation feedback,
    so one stream can drive several policies for attribution.
    """
    if isinstance(spec, PoissonOpenSpec):
        rng = rng_stream(seed, WORKLOAD_STREAM)
        mix = _normalize_mix(spec.mix)
        names = [n for n, _ in mix]
        weights = [w for _, w in mix]
        out = []
        t = 0.0
        end = spec.duration_s * US_PER_S
        if spec.rate_per_s == 0:
            return []
        mean_us = US_PER_S / spec.rate_per_s
        # draws happen in fixed-size blocks; the stream is a pure function of
        # (spec, seed) either way, block size included
        block = 1024
        done = False
        while not done:
            gaps = rng.exponential(mean_us, size=block)
            picks = rng.choice(len(names), size=block, p=weights)
            for gap, pick in zip(gaps, picks):
                t += gap
                if t >= end:
                    done = True
                    break
                out.append(ArrivalRecord(int(round(t)), names[pick]))
        return out
    if isinstance(spec, TraceSpec):
        records = parse_trace(spec.path, known_functions)
        return [ArrivalRecord(int(round(r.timestamp_us * spec.time_scale)), r.function)
                for r in records]
    if isinstance(spec, SequenceSpec):
        return [ArrivalRecord(int(round(ms * US_PER_MS)), name)
                for ms, name in spec.arrivals]
    raise TypeError(f"not an open-loop source spec: {spec!r}")


class OpenLoopSource:
    """Feeds a pre-generated arrival list; schedules one event ahead so the
    heap never holds the whole stream."""

    def __init__(self, arrivals: list[ArrivalRecord]):
        self.arrivals = arrivals
        self.functions = sorted({a.function for a in arrivals})
        self._idx = 0
        self._sim = None

    def attach(self, sim) -> None:
        self._sim = sim
        self._schedule_next()

    def _schedule_next(self) -> None:
        if self._idx >= len(self.arrivals):
            return
        rec = self.arrivals[self._idx]
        self._sim.engine.schedule(rec.timestamp_us, EventKind.ARRIVAL,
                                  self._on_arrival, rec)

    def _on_arrival(self, rec: ArrivalRecord) -> None:
        self._idx += 1
        self._schedule_next()
        self._sim.submit(rec.function)


class ClosedLoopSource:
    """concurrency-many chains; each issues its next request the instant the
    previous one completes (zero think time)."""

    def __init__(self, spec: ClosedLoopSpec, seed: int):
        self.spec = spec
        self.rng = rng_stream(seed, WORKLOAD_STREAM)
        mix = _normalize_mix(spec.mix)
        self._names = [n for n, _ in mix]
        self._weights = [w for _, w in mix]
        self.functions = list(self._names)
        self._issued = 0
        self._chain_of: dict[int, int] = {}
        self._sim = None

    def attach(self, sim) -> None:
        self._sim = sim
        sim.completion_listeners.append(self._on_complete)
        for chain in range(min(self.spec.concurrency, self.spec.count)):
            self._sim.engine.schedule(0, EventKind.GENERATOR_TICK, self._issue, chain)

    def _issue(self, chain: int) -> None:
        name = self._names[self.rng.choice(len(self._names), p=self._weights)]
        inv = self._sim.submit(name)
        self._chain_of[inv.id] = chain
        self._issued += 1

    def _on_complete(self, inv, now: int) -> None:
        chain = self._chain_of.pop(inv.id, None)
        if chain is None:
            return
        if self._issued < self.spec.count:
            self._sim.engine.schedule(now, EventKind.GENERATOR_TICK, self._issue, chain)


def parse_trace(path, known_functions=None) -> list[ArrivalRecord]:
    """Read a flat trace CSV (header `timestamp_ms,function`), sorted by time."""
    records = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            return []  # zero-byte file counts as an empty trace
        if [h.strip() for h in header] != ["timestamp_ms", "function"]:
            raise TraceParseError(f"{path}: line 1: expected header 'timestamp_ms,function'")
        for lineno, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != 2:
                raise TraceParseError(f"{path}: line {lineno}: expected 2 columns, got {len(row)}")
            try:
                ts = float(row[0])
            except ValueError:
                raise TraceParseError(f"{path}: line {lineno}: bad timestamp {row[0]!r}") from None
            if ts < 0:
                raise TraceParseError(f"{path}: line {lineno}: negative timestamp")
            fn = row[1].strip()
            if known_functions is not None and fn not in known_functions:
                raise TraceParseError(f"{path}: line {lineno}: unknown function {fn!r}")
            records.append(ArrivalRecord(int(round(ts * US_PER_MS)), fn))
    records.sort(key=lambda r: (r.timestamp_us, r.function))
    return records


def trace_totals(records) -> dict[str, int]:
    totals: dict[str, int] = {}
    for r in records:
        totals[r.function] = totals.get(r.function, 0) + 1
    return dict(sorted(totals.items()))


def flatten_maf(input_path, output_path) -> int:
    """Spread per-minute invocation counts into the flat trace format.

    Input rows: function id, then 1440 per-minute counts. A minute with
    count k becomes k arrivals spaced 60000/k ms apart from the minute mark.
    """
    rows_out = []
    with open(input_path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise TraceParseError(f"{input_path}: empty input")
        for lineno, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != 1441:
                raise TraceParseError(
                    f"{input_path}: line {lineno}: expected 1441 columns, got {len(row)}")
            fn = row[0].strip()
            for minute, cell in enumerate(row[1:]):
                try:
                    count = int(cell or 0)
                except ValueError:
                    raise TraceParseError(
                        f"{input_path}: line {lineno}: bad count {cell!r} at minute {minute}"
                    ) from None
                if count < 0:
                    raise TraceParseError(
                        f"{input_path}: line {lineno}: negative count at minute {minute}")
                for i in range(count):
                    ts_ms = minute * 60_000 + (i * 60_000) // count
                    rows_out.append((ts_ms, fn))
    rows_out.sort()
    with open(output_path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["timestamp_ms", "function"])
        for ts, fn in rows_out:
            w.writerow([ts, fn])
    return len(rows_out)


@dataclass
class StabilityStats:
    """What the peak search inspects about one probe run."""
    queue_early: int
    queue_end: int
    p99_first_quartile_ms: Optional[float]
    p99_last_quartile_ms: Optional[float]
    completed_first_quartile: int
    completed_last_quartile: int


def is_stable(stats: StabilityStats, p99_growth_limit: float = 2.0) -> bool:
    """A rate is stable iff the backlog did not grow past its early level and
    tail latency of late arrivals stayed within the growth limit."""
    if stats.queue_end > stats.queue_early:
        return False
    if stats.completed_first_quartile == 0 and stats.completed_last_quartile == 0:
        return True  # nothing to process: trivially stable
    if stats.completed_last_quartile == 0:
        return False  # system stopped completing work
    if stats.p99_first_quartile_ms is None or stats.p99_first_quartile_ms == 0:
        return True
    return stats.p99_last_quartile_ms <= p99_growth_limit * stats.p99_first_quartile_ms


@dataclass
class PeakSearchResult:
    rate_per_s: float
    hit_ceiling: bool
    trajectory: list  # (rate, stable) pairs in probe order
    diagnostic: str = ""


def find_peak_throughput(probe: Callable[[float], StabilityStats], *,
                         rate_min: float = 0.5, rate_ceiling: float = 4096.0,
                         resolution: float = 0.01,
                         p99_growth_limit: float = 2.0) -> PeakSearchResult:
    """Largest stable rate, by doubling then bisecting to the resolution.

    Assumes instability is monotone in the rate. Returns rate 0 with a
    diagnostic when even `rate_min` is unstable.
    """
    trajectory = []

    def stable_at(rate: float) -> bool:
        ok = is_stable(probe(rate), p99_growth_limit)
        trajectory.append((rate, ok))
        return ok

    if not stable_at(rate_min):
        return PeakSearchResult(0.0, False, trajectory,
                                diagnostic=f"no stable rate at minimum probe {rate_min}/s")
    lo = rate_min
    hi = None
    rate = rate_min
    while hi is None:
        rate = min(rate * 2, rate_ceiling)
        if stable_at(rate):
            lo = rate
            if rate >= rate_ceiling:
                return PeakSearchResult(rate_ceiling, True, trajectory,
                                        diagnostic="stable at the configured rate ceiling")
        else:
            hi = rate
    while (hi - lo) / lo > resolution:
        mid = (lo + hi) / 2
        if stable_at(mid):
            lo = mid
        else:
            hi = mid
    return PeakSearchResult(lo, False, trajectory)


def probe_stats(sim, duration_us: int) -> StabilityStats:
    """Extract the stability signals from a finished probe run."""
    q1_end = duration_us // 4
    q4_start = duration_us - duration_us // 4
    first, last = [], []
    n_first = n_last = 0
    for inv in sim.invocations:
        if inv.arrival_us <= q1_end:
            n_first += 1
            if inv.outcome == "completed":
                first.append(inv.latency_us / US_PER_MS)
        elif inv.arrival_us >= q4_start:
            n_last += 1
            if inv.outcome == "completed":
                last.append(inv.latency_us / US_PER_MS)
    from .metrics import percentile
    early_key = min((k for k in sim.queue_samples if k < duration_us),
                    default=duration_us)
    return StabilityStats(
        queue_early=sim.queue_samples.get(early_key, 0),
        queue_end=sim.queued_at_end(),
        p99_first_quartile_ms=percentile(first, 99) if first else None,
        p99_last_quartile_ms=percentile(last, 99) if last else None,
        completed_first_quartile=len(first),
        completed_last_quartile=len(last),
    )
