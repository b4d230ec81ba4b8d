"""Per-invocation records, aggregate statistics, and memory timelines."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Optional

from .engine import US_PER_MS, US_PER_S
from .functions import STAGE_ORDER
from .resources import AllocClass, umb_to_mb

OUTCOME_COMPLETED = "completed"
OUTCOME_FAILED = "failed"
OUTCOME_PENDING = "pending"


def theoretical_throughput(t_period_ms: float, t_comp_ms: float) -> float:
    """Invocations a GPU could serve back-to-back if compute were the only
    stage: T_period / T_comp."""
    if t_comp_ms <= 0:
        raise ValueError(f"compute time must be positive, got {t_comp_ms}")
    return t_period_ms / t_comp_ms


def percentile(samples, p) -> float:
    """Nearest-rank percentile: the ceil(p/100 * n)-th order statistic."""
    if not 0 <= p <= 100:
        raise ValueError(f"percentile p must be in [0, 100], got {p}")
    n = len(samples)
    if n == 0:
        raise ValueError("percentile of empty sample set")
    rank = max(1, math.ceil(Fraction(p) * n / 100))
    return sorted(samples)[rank - 1]


_TIMELINE_CLASSES = (AllocClass.CONTEXT, AllocClass.READ_ONLY,
                     AllocClass.WRITABLE, AllocClass.INSTANCE_FIXED)


class MemoryTimeline:
    """Piecewise-constant GPU usage by class.

    An entry lands at every allocation boundary plus the periodic
    measurement ticks, so peaks are never lost; entries at one instant are
    coalesced to the final state of that instant. The time integral and the
    running peak are maintained incrementally and exactly.
    """

    def __init__(self, gpu: int, ledger):
        self.gpu = gpu
        self._ledger = ledger
        self.entries: list[tuple[int, int, int, int, int]] = []  # t, ctx, ro, w, inst
        self._integral = 0   # umb * us, exact
        self._last_t = 0
        self._last_usage = 0
        self._peak = 0
        self.record(0)

    def record(self, now: int) -> None:
        by_class = self._ledger._usage_by_class
        entry = (now,) + tuple(by_class[c] for c in _TIMELINE_CLASSES)
        if self.entries and self.entries[-1][0] == now:
            self.entries[-1] = entry
        else:
            self.entries.append(entry)
        usage = self._ledger.usage_umb
        self._integral += self._last_usage * (now - self._last_t)
        self._last_t = now
        self._last_usage = usage
        if usage > self._peak:
            self._peak = usage

    def time_average_umb(self, end_us: int) -> Fraction:
        """Exact time-averaged total usage over [0, end]."""
        if end_us <= 0:
            return Fraction(0)
        if end_us < self._last_t:
            raise ValueError("time_average_umb: end precedes the last recorded entry")
        total = self._integral + self._last_usage * (end_us - self._last_t)
        return Fraction(total, end_us)

    def peak_umb(self) -> int:
        return self._peak


@dataclass
class RunSummary:
    duration_ms: float
    arrivals: int
    completed: int
    failed: int
    pending: int
    throughput_per_s: float
    per_function: dict
    theoretical: dict
    normalized_perf: dict
    channel_utilization: dict
    gpu_memory: dict
    mean_latency_ms: Optional[float] = None
    p99_latency_ms: Optional[float] = None

    def to_dict(self) -> dict:
        return {
            "duration_ms": self.duration_ms,
            "counts": {"arrivals": self.arrivals, "completed": self.completed,
                       "failed": self.failed, "pending": self.pending},
            "throughput_per_s": self.throughput_per_s,
            "latency_ms": {"mean": self.mean_latency_ms, "p99": self.p99_latency_ms},
            "per_function": self.per_function,
            "theoretical_throughput": self.theoretical,
            "normalized_performance": self.normalized_perf,
            "channel_utilization": self.channel_utilization,
            "gpu_memory_mb": self.gpu_memory,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def summarize(invocations, duration_us: int, spec_table,
              channels=None, timelines=None) -> RunSummary:
    period_ms = duration_us / US_PER_MS
    completed = [r for r in invocations if r.outcome == OUTCOME_COMPLETED]
    failed = [r for r in invocations if r.outcome == OUTCOME_FAILED]
    pending = [r for r in invocations if r.outcome == OUTCOME_PENDING]

    per_fn: dict[str, dict] = {}
    by_fn: dict[str, list] = {}
    for r in completed:
        by_fn.setdefault(r.spec.name, []).append(r.latency_us)
    for name, lats in sorted(by_fn.items()):
        per_fn[name] = {
            "count": len(lats),
            "mean_ms": sum(lats) / len(lats) / US_PER_MS,
            "p50_ms": percentile(lats, 50) / US_PER_MS,
            "p99_ms": percentile(lats, 99) / US_PER_MS,
            "max_ms": max(lats) / US_PER_MS,
        }

    theoretical = {}
    normalized = {}
    for name, spec in sorted(spec_table.items()):
        theo = theoretical_throughput(period_ms, spec.compute_ms)
        theoretical[name] = theo
        done = len(by_fn.get(name, ()))
        normalized[name] = done / theo if theo > 0 else 0.0

    chan_util = {}
    if channels:
        for ch in channels:
            denom = Fraction(ch.bandwidth_mbps) * duration_us
            chan_util[ch.name] = float(ch.delivered_total_umb / denom) if denom else 0.0

    gpu_mem = {}
    if timelines:
        for tl in timelines:
            gpu_mem[f"gpu{tl.gpu}"] = {
                "avg_mb": float(umb_to_mb(tl.time_average_umb(duration_us))),
                "peak_mb": umb_to_mb(tl.peak_umb()),
            }

    all_lat = [r.latency_us for r in completed]
    return RunSummary(
        duration_ms=period_ms,
        arrivals=len(invocations),
        completed=len(completed),
        failed=len(failed),
        pending=len(pending),
        throughput_per_s=len(completed) / (duration_us / US_PER_S) if duration_us else 0.0,
        per_function=per_fn,
        theoretical=theoretical,
        normalized_perf=normalized,
        channel_utilization=chan_util,
        gpu_memory=gpu_mem,
        mean_latency_ms=(sum(all_lat) / len(all_lat) / US_PER_MS) if all_lat else None,
        p99_latency_ms=(percentile(all_lat, 99) / US_PER_MS) if all_lat else None,
    )


INVOCATION_COLUMNS = (
    ["id", "function", "gpu", "arrival_ms", "start_ms", "completion_ms",
     "end_to_end_ms", "queued_ms", "warmth", "outcome",
     "host_bytes_mb", "pcie_bytes_mb"]
    + [f"{s.value}_{edge}_ms" for s in STAGE_ORDER for edge in ("begin", "end")]
)


def _fmt_ms(us: Optional[int]) -> str:
    return "" if us is None else format(us / US_PER_MS, ".3f")


def write_invocations_csv(path, invocations) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(INVOCATION_COLUMNS)
        for r in sorted(invocations, key=lambda x: x.id):
            row = [r.id, r.spec.name, r.gpu if r.gpu is not None else "",
                   _fmt_ms(r.arrival_us), _fmt_ms(r.start_us), _fmt_ms(r.completion_us),
                   _fmt_ms(r.latency_us if r.outcome == OUTCOME_COMPLETED else None),
                   _fmt_ms(r.queued_us if r.start_us is not None else None),
                   r.warmth.label() if r.warmth is not None else "",
                   r.outcome,
                   format(umb_to_mb(r.host_bytes_umb), ".6f"),
                   format(umb_to_mb(r.pcie_bytes_umb), ".6f")]
            for stage in STAGE_ORDER:
                iv = r.stages.get(stage)
                row.append(_fmt_ms(iv[0] if iv else None))
                row.append(_fmt_ms(iv[1] if iv and iv[1] is not None else None))
            w.writerow(row)


TIMELINE_COLUMNS = ["t_ms", "gpu", "context_mb", "read_only_mb", "writable_mb",
                    "instance_mb", "total_mb"]


def write_timeline_csv(path, timelines) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TIMELINE_COLUMNS)
        for tl in timelines:
            for t, ctx, ro, wr, inst in tl.entries:
                w.writerow([
                    format(t / US_PER_MS, ".3f"), tl.gpu,
                    format(umb_to_mb(ctx), ".6f"),
                    format(umb_to_mb(ro), ".6f"),
                    format(umb_to_mb(wr), ".6f"),
                    format(umb_to_mb(inst), ".6f"),
                    format(umb_to_mb(ctx + ro + wr + inst), ".6f"),
                ])
