"""Wires one experiment together: engine, channels, ledgers, sharing
manager, policy, workload source, and the per-invocation records."""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Optional

from .engine import (DISPATCH_STREAM, Engine, EventKind, SimulationError,
                     rng_stream)
from .functions import (ComputeGate, ExecutionContext, FunctionSpec, Stage,
                        StagePlan, WarmthClass, execute_plan)
from .metrics import (MemoryTimeline, OUTCOME_COMPLETED, OUTCOME_FAILED,
                      OUTCOME_PENDING)
from .policies import PolicyConfig, PoolPolicy, SharingPolicy, build_policy
from .resources import Channel, MemoryLedger
from .sharing import SharingManager

MEASUREMENT_TICK_US = 100_000  # 100 ms memory sampling cadence


@dataclass(frozen=True)
class ClusterSpec:
    gpus: int = 1
    gpu_mem_mb: float = 40960.0
    pcie_bw_mbps: float = 5051.0
    host_bw_mbps: float = 1631.0
    cpu_mem_mb: Optional[float] = None     # None = unlimited host memory
    compute_concurrency: Optional[int] = None
    pre_warmed_containers: bool = True

    def __post_init__(self):
        if self.gpus < 1:
            raise ValueError("cluster needs at least one GPU")
        if self.gpu_mem_mb <= 0 or self.pcie_bw_mbps <= 0 or self.host_bw_mbps <= 0:
            raise ValueError("cluster capacities and bandwidths must be positive")


class Invocation:
    """One request's lifecycle record."""

    __slots__ = ("id", "spec", "arrival_us", "gpu", "start_us", "completion_us",
                 "warmth", "outcome", "stages", "host_bytes_umb", "pcie_bytes_umb",
                 "allocations", "grant", "ctx_slot", "was_queued", "fail_reason")

    def __init__(self, iid: int, spec: FunctionSpec, arrival_us: int):
        self.id = iid
        self.spec = spec
        self.arrival_us = arrival_us
        self.gpu: Optional[int] = None
        self.start_us: Optional[int] = None
        self.completion_us: Optional[int] = None
        self.warmth: Optional[WarmthClass] = None
        self.outcome = OUTCOME_PENDING
        self.stages: dict[Stage, list] = {}
        self.host_bytes_umb = 0
        self.pcie_bytes_umb = 0
        self.allocations: list = []
        self.grant = None
        self.ctx_slot = None
        self.was_queued = False
        self.fail_reason: Optional[str] = None

    def mark_queued(self) -> None:
        self.was_queued = True

    def stage_begin(self, stage: Stage, now: int) -> None:
        self.stages[stage] = [now, None]

    def stage_end(self, stage: Stage, now: int) -> None:
        self.stages[stage][1] = now

    def add_bytes(self, channel: str, umb: int) -> None:
        if channel == "host":
            self.host_bytes_umb += umb
        else:
            self.pcie_bytes_umb += umb

    @property
    def latency_us(self) -> Optional[int]:
        if self.completion_us is None:
            return None
        return self.completion_us - self.arrival_us

    @property
    def queued_us(self) -> Optional[int]:
        if self.start_us is None:
            return None
        return self.start_us - self.arrival_us

    def __repr__(self):
        return f"Invocation({self.id}, {self.spec.name}, t={self.arrival_us})"


class Simulation:
    """One deterministic run of one policy on one workload."""

    def __init__(self, cluster: ClusterSpec, policy_cfg: PolicyConfig,
                 spec_table: dict[str, FunctionSpec], source, seed: int,
                 duration_us: int, log_events: bool = False,
                 register_functions: Optional[list[str]] = None):
        self.cluster = cluster
        self.policy_cfg = policy_cfg
        self.spec_table = spec_table
        self.seed = seed
        self.duration_us = duration_us
        self.engine = Engine(log_events=log_events)
        self.gpu_count = cluster.gpus
        self.pre_warmed = cluster.pre_warmed_containers
        self.dispatcher_rng = rng_stream(seed, DISPATCH_STREAM)

        self.host_channel = Channel(self.engine, "host", cluster.host_bw_mbps)
        self.pcie_channels = [Channel(self.engine, f"pcie-gpu{g}", cluster.pcie_bw_mbps)
                              for g in range(cluster.gpus)]
        self.gpu_ledgers = []
        self.timelines = []
        for g in range(cluster.gpus):
            ledger = MemoryLedger(f"gpu{g}", cluster.gpu_mem_mb,
                                  granularity_mb=policy_cfg.granularity_mb)
            tl = MemoryTimeline(g, ledger)
            ledger.on_change = lambda tl=tl: tl.record(self.engine.now)
            self.gpu_ledgers.append(ledger)
            self.timelines.append(tl)
        self.cpu_ledger = MemoryLedger("cpu", cluster.cpu_mem_mb)

        self.compute_gates = None
        if cluster.compute_concurrency is not None:
            self.compute_gates = [ComputeGate(cluster.compute_concurrency)
                                  for _ in range(cluster.gpus)]

        self.sharing: Optional[SharingManager] = None
        self.policy = build_policy(self, policy_cfg)
        if isinstance(self.policy, SharingPolicy):
            intervals = policy_cfg.stage_interval_s
            if not isinstance(intervals, (list, tuple)):
                intervals = (intervals,) * 4
            self.sharing = SharingManager(
                self.engine, self.gpu_ledgers, self.cpu_ledger,
                ro_sharing=policy_cfg.ro_sharing, ctx_sharing=policy_cfg.ctx_sharing,
                multi_stage_exit=policy_cfg.multi_stage_exit,
                keep_alive_s=policy_cfg.keep_alive_s,
                stage_intervals_s=intervals,
                on_gpu_freed=self.policy.on_memory_freed)
        if isinstance(self.policy, PoolPolicy):
            names = register_functions if register_functions is not None else sorted(spec_table)
            for name in names:
                self.policy.register(self.spec_table[name])

        self.invocations: list[Invocation] = []
        self.completion_listeners = []
        self.queue_samples: dict[int, int] = {}
        self._ids = itertools.count()
        self._in_flight = 0

        self.source = source
        if source is not None:
            source.attach(self)
        self._schedule_ticks()

    # -- workload entry points ----------------------------------------------

    def submit(self, fn_name: str, arrival_us: Optional[int] = None) -> Invocation:
        if fn_name not in self.spec_table:
            raise SimulationError(f"unknown function {fn_name!r}")
        inv = Invocation(next(self._ids), self.spec_table[fn_name],
                         self.engine.now if arrival_us is None else arrival_us)
        self.invocations.append(inv)
        self.policy.on_arrival(inv)
        return inv

    # -- policy callbacks ----------------------------------------------------

    def start_invocation(self, inv: Invocation, warmth: WarmthClass,
                         plan: StagePlan, wait_tokens=(), stage_hooks=None) -> None:
        now = self.engine.now
        inv.start_us = now
        inv.warmth = warmth
        self._in_flight += 1
        ctx = ExecutionContext(
            engine=self.engine,
            host_channel=self.host_channel,
            pcie_channel=self.pcie_channels[inv.gpu],
            compute_gate=self.compute_gates[inv.gpu] if self.compute_gates else None,
            wait_tokens=wait_tokens,
            stage_hooks=stage_hooks or {})
        execute_plan(plan, inv, ctx, self._on_invocation_done)

    def fail_invocation(self, inv: Invocation, reason: str) -> None:
        inv.outcome = OUTCOME_FAILED
        inv.fail_reason = reason
        inv.completion_us = self.engine.now

    def _on_invocation_done(self, inv: Invocation, now: int) -> None:
        inv.outcome = OUTCOME_COMPLETED
        inv.completion_us = now
        self._in_flight -= 1
        self.policy.complete(inv)
        for cb in self.completion_listeners:
            cb(inv, now)

    # -- measurement ----------------------------------------------------------

    def _schedule_ticks(self) -> None:
        if self.duration_us <= 0:
            return
        self.engine.schedule(min(MEASUREMENT_TICK_US, self.duration_us),
                             EventKind.MEASUREMENT_TICK, self._on_tick)
        sample_at = self.duration_us // 10
        if sample_at > 0:
            self.engine.schedule(sample_at, EventKind.MEASUREMENT_TICK,
                                 self._sample_queue, "early")

    def _on_tick(self, _payload) -> None:
        now = self.engine.now
        for tl in self.timelines:
            tl.record(now)
        if now + MEASUREMENT_TICK_US <= self.duration_us:
            self.engine.schedule(now + MEASUREMENT_TICK_US,
                                 EventKind.MEASUREMENT_TICK, self._on_tick)

    def _sample_queue(self, _payload) -> None:
        self.queue_samples[self.engine.now] = self.policy.queued_count()

    # -- run -------------------------------------------------------------------

    def run(self) -> "Simulation":
        self.engine.run(until=self.duration_us)
        self.queue_samples[self.duration_us] = self.policy.queued_count()
        for tl in self.timelines:
            tl.record(self.duration_us)
        return self

    def queued_at_end(self) -> int:
        return self.queue_samples.get(self.duration_us, self.policy.queued_count())

    def check_no_leaks(self) -> None:
        """After a fully drained run every GPU byte must be accounted for by
        deliberately persistent holders (staged residents, DGSF pools)."""
        persistent = 0
        if self.sharing is not None:
            for r in self.sharing.residents.values():
                for alloc in (r.gpu_ro, r.gpu_ctx):
                    if alloc is not None:
                        persistent += alloc.effective_umb
        if isinstance(self.policy, PoolPolicy):
            for pool in self.policy.pools.values():
                for slot in pool.slots:
                    if slot.alloc is not None:
                        persistent += slot.alloc.effective_umb
        actual = sum(l.usage_umb for l in self.gpu_ledgers)
        if actual != persistent:
            raise SimulationError(
                f"GPU memory leak: {actual} umb held vs {persistent} umb persistent")
