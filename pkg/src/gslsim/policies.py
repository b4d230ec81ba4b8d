"""The five scheduling policies as configurations over the mechanisms.

FixedGSL        size-fixed 1 GB-granular instances, serial setup, no sharing
FixedGSL-F      FixedGSL with exact (flexible) allocation
DGSF            four pre-created GPU contexts per function, FCFS slot queue
SAGE            parallel setup + RO/context sharing + multi-stage exit
SAGE-NR         SAGE with read-only sharing disabled

Placement is uniform-random over the GPUs for every policy; admission
control, queueing, and completion bookkeeping differ per policy.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, replace
from typing import Optional

from .engine import EventKind, SimulationError, s_to_us
from .functions import (FunctionSpec, PlanMode, Stage, WarmthClass,
                        plan_invocation)
from .resources import AllocClass, Denied

POLICY_NAMES = ("FixedGSL", "FixedGSLF", "DGSF", "SAGE", "SAGE_NR")
_ALIASES = {"FixedGSL-F": "FixedGSLF", "SAGE-NR": "SAGE_NR"}


@dataclass(frozen=True)
class PolicyConfig:
    name: str
    plan_mode: PlanMode
    granularity_mb: float          # 0 = exact allocation
    ro_sharing: bool
    ctx_sharing: bool
    multi_stage_exit: bool
    pre_created_contexts: int = 0
    keep_alive_s: float = 0.0
    dgsf_ctx_ttl_s: Optional[float] = None
    stage_interval_s: float = 30.0

    def with_overrides(self, **kw) -> "PolicyConfig":
        if "plan_mode" in kw and not isinstance(kw["plan_mode"], PlanMode):
            kw["plan_mode"] = PlanMode(kw["plan_mode"])
        return replace(self, **kw)


_PRESETS = {
    "FixedGSL": PolicyConfig("FixedGSL", PlanMode.SERIAL, 1024.0, False, False, False),
    "FixedGSLF": PolicyConfig("FixedGSLF", PlanMode.SERIAL, 0.0, False, False, False),
    "DGSF": PolicyConfig("DGSF", PlanMode.SERIAL, 0.0, False, False, False,
                         pre_created_contexts=4),
    "SAGE": PolicyConfig("SAGE", PlanMode.PARALLEL, 0.0, True, True, True),
    "SAGE_NR": PolicyConfig("SAGE_NR", PlanMode.PARALLEL, 0.0, False, True, True),
}


def policy_preset(name: str) -> PolicyConfig:
    canon = _ALIASES.get(name, name)
    if canon not in _PRESETS:
        raise ValueError(f"unknown policy {name!r}; expected one of {POLICY_NAMES}")
    return _PRESETS[canon]


class BasePolicy:
    """Shared placement + queueing skeleton; subclasses fill in admission."""

    def __init__(self, sim, cfg: PolicyConfig):
        self.sim = sim
        self.cfg = cfg
        self.queues = [deque() for _ in range(sim.gpu_count)]

    def place(self, inv) -> int:
        # uniform random dispatch; the draw is taken even on 1-GPU clusters
        # so that the dispatcher stream is identical across cluster sizes
        return int(self.sim.dispatcher_rng.integers(0, self.sim.gpu_count))

    def on_arrival(self, inv) -> None:
        inv.gpu = self.place(inv)
        # strict FIFO: a newcomer never overtakes already-queued invocations
        if self.queues[inv.gpu] or not self._try_start(inv):
            inv.mark_queued()
            self.queues[inv.gpu].append(inv)

    def on_memory_freed(self, gpu: int) -> None:
        self._drain_queue(gpu)

    def _drain_queue(self, gpu: int) -> None:
        q = self.queues[gpu]
        while q and self._try_start(q[0]):
            q.popleft()

    def queued_count(self) -> int:
        return sum(len(q) for q in self.queues)

    def _try_start(self, inv) -> bool:
        raise NotImplementedError

    def complete(self, inv) -> None:
        raise NotImplementedError


class InstancePolicy(BasePolicy):
    """FixedGSL / FixedGSL-F: one size-fixed allocation per invocation."""

    def _try_start(self, inv) -> bool:
        spec = inv.spec
        ledger = self.sim.gpu_ledgers[inv.gpu]
        if (ledger.capacity_umb is not None
                and ledger.effective_umb(spec.instance_umb) > ledger.capacity_umb):
            self.sim.fail_invocation(inv, "instance larger than GPU memory")
            return True
        got = ledger.try_alloc(spec.instance_umb, AllocClass.INSTANCE_FIXED, owner=inv.id)
        if isinstance(got, Denied):
            return False
        inv.allocations.append(got)
        plan = plan_invocation(spec, WarmthClass.COLD, self.cfg.plan_mode,
                               pre_warmed=self.sim.pre_warmed)
        self.sim.start_invocation(inv, WarmthClass.COLD, plan)
        return True

    def complete(self, inv) -> None:
        ledger = self.sim.gpu_ledgers[inv.gpu]
        for a in inv.allocations:
            ledger.free(a)
        inv.allocations.clear()
        self._drain_queue(inv.gpu)


class _CtxSlot:
    __slots__ = ("alloc", "busy", "ttl_event")

    def __init__(self, alloc):
        self.alloc = alloc     # None while destroyed by the TTL extension
        self.busy = False
        self.ttl_event = None


class _ContextPool:
    """Pre-created contexts of one function on one GPU, FCFS waiters."""

    def __init__(self, slots: int):
        self.slots = [_CtxSlot(None) for _ in range(slots)]
        self.waiters: deque = deque()

    def acquire(self) -> Optional[_CtxSlot]:
        live = [s for s in self.slots if not s.busy and s.alloc is not None]
        pool = live or [s for s in self.slots if not s.busy]
        if not pool:
            return None
        slot = pool[0]
        slot.busy = True
        return slot


class PoolPolicy(BasePolicy):
    """DGSF: context pool per (function, GPU), per-invocation data loads."""

    def __init__(self, sim, cfg: PolicyConfig):
        super().__init__(sim, cfg)
        self.pools: dict[tuple[str, int], _ContextPool] = {}
        self.ttl_us = None if cfg.dgsf_ctx_ttl_s is None else s_to_us(cfg.dgsf_ctx_ttl_s)

    def register(self, spec: FunctionSpec) -> None:
        """Pre-create the context pool on every GPU; held for the whole run
        (unless the idle-context TTL extension is enabled)."""
        for gpu in range(self.sim.gpu_count):
            key = (spec.name, gpu)
            if key in self.pools:
                continue
            pool = _ContextPool(self.cfg.pre_created_contexts)
            for slot in pool.slots:
                got = self.sim.gpu_ledgers[gpu].try_alloc(
                    spec.context_umb, AllocClass.CONTEXT, owner=key)
                if isinstance(got, Denied):
                    raise SimulationError(
                        f"DGSF: cannot pre-create contexts for {spec.name} on gpu{gpu}")
                slot.alloc = got
                self._arm_ttl(spec.name, gpu, slot)
            self.pools[key] = pool

    def _pool(self, inv) -> _ContextPool:
        key = (inv.spec.name, inv.gpu)
        if key not in self.pools:
            self.register(inv.spec)
        return self.pools[key]

    def on_arrival(self, inv) -> None:
        inv.gpu = self.place(inv)
        spec = inv.spec
        ledger = self.sim.gpu_ledgers[inv.gpu]
        data_umb = spec.ro_umb + spec.writable_umb
        if (ledger.capacity_umb is not None
                and ledger.effective_umb(data_umb) > ledger.capacity_umb):
            self.sim.fail_invocation(inv, "data larger than GPU memory")
            return
        pool = self._pool(inv)
        if pool.waiters or not self._try_start(inv):
            inv.mark_queued()
            pool.waiters.append(inv)

    def _try_start(self, inv) -> bool:
        spec = inv.spec
        pool = self._pool(inv)
        slot = pool.acquire()
        if slot is None:
            return False
        ledger = self.sim.gpu_ledgers[inv.gpu]
        allocs = []
        for size, cls in ((spec.ro_umb, AllocClass.READ_ONLY),
                          (spec.writable_umb, AllocClass.WRITABLE)):
            if size == 0:
                continue
            got = ledger.try_alloc(size, cls, owner=inv.id)
            if isinstance(got, Denied):
                for a in allocs:
                    ledger.free(a)
                slot.busy = False
                return False
            allocs.append(got)
        recreate = slot.alloc is None
        if recreate:
            got = ledger.try_alloc(spec.context_umb, AllocClass.CONTEXT,
                                   owner=(spec.name, inv.gpu))
            if isinstance(got, Denied):
                for a in allocs:
                    ledger.free(a)
                slot.busy = False
                return False
            slot.alloc = got
        if slot.ttl_event is not None:
            self.sim.engine.cancel(slot.ttl_event)
            slot.ttl_event = None
        inv.allocations.extend(allocs)
        inv.ctx_slot = slot
        plan = plan_invocation(spec, WarmthClass.COLD, self.cfg.plan_mode,
                               pre_warmed=self.sim.pre_warmed,
                               ctx_external=not recreate)
        self.sim.start_invocation(inv, WarmthClass.COLD, plan)
        return True

    def complete(self, inv) -> None:
        ledger = self.sim.gpu_ledgers[inv.gpu]
        for a in inv.allocations:
            ledger.free(a)
        inv.allocations.clear()
        slot = inv.ctx_slot
        inv.ctx_slot = None
        slot.busy = False
        self.on_memory_freed(inv.gpu)
        if not slot.busy:
            self._arm_ttl(inv.spec.name, inv.gpu, slot)

    def _arm_ttl(self, name: str, gpu: int, slot: _CtxSlot) -> None:
        if self.ttl_us is not None and slot.alloc is not None and slot.ttl_event is None:
            slot.ttl_event = self.sim.engine.schedule(
                self.sim.engine.now + self.ttl_us, EventKind.EXIT_TIMER,
                self._expire_slot, (name, gpu, slot))

    def on_memory_freed(self, gpu: int) -> None:
        # a freed data allocation can unblock waiters of any pool on the GPU
        for key in sorted(self.pools):
            if key[1] != gpu:
                continue
            waiters = self.pools[key].waiters
            while waiters and self._try_start(waiters[0]):
                waiters.popleft()

    def _expire_slot(self, payload) -> None:
        name, gpu, slot = payload
        slot.ttl_event = None
        if not slot.busy and slot.alloc is not None:
            self.sim.gpu_ledgers[gpu].free(slot.alloc)
            slot.alloc = None

    def queued_count(self) -> int:
        return sum(len(p.waiters) for p in self.pools.values())


class SharingPolicy(BasePolicy):
    """SAGE / SAGE-NR: admit against the sharing manager, allocate deltas."""

    def _try_start(self, inv) -> bool:
        spec = inv.spec
        sharing = self.sim.sharing
        ledger = self.sim.gpu_ledgers[inv.gpu]
        preview = sharing.preview(spec, inv.gpu)
        private_ro = 0 if (self.cfg.ro_sharing or spec.ro_mem_mb == 0) else spec.ro_umb
        private_ctx = 0 if self.cfg.ctx_sharing else spec.context_umb
        delta = preview.resident_delta_umb + private_ro + private_ctx + spec.writable_umb
        worst_case = spec.instance_umb
        if ledger.capacity_umb is not None and worst_case > ledger.capacity_umb:
            self.sim.fail_invocation(inv, "function larger than GPU memory")
            return True
        if not ledger.fits(delta):
            if not sharing.force_demote(inv.gpu, delta, exclude_fn=spec.name):
                return False
        grant = sharing.admit(spec, inv.gpu, preview)
        for size, cls in ((private_ro, AllocClass.READ_ONLY),
                          (private_ctx, AllocClass.CONTEXT),
                          (spec.writable_umb, AllocClass.WRITABLE)):
            if size == 0:
                continue
            got = ledger.try_alloc(size, cls, owner=inv.id)
            if isinstance(got, Denied):
                raise SimulationError("private allocation denied after capacity check")
            inv.allocations.append(got)
        inv.grant = grant
        plan = plan_invocation(spec, grant.warmth, self.cfg.plan_mode,
                               pre_warmed=self.sim.pre_warmed,
                               wait_ro=grant.wait_ro, wait_ctx=grant.wait_ctx)
        tokens = []
        if grant.wait_ro:
            tokens.append(grant.resident.ro_token)
        if grant.wait_ctx:
            tokens.append(grant.resident.ctx_token)
        hooks = {}
        if grant.leader_ro:
            hooks[Stage.GPU_LOAD] = grant.resident.ro_token.set_ready
        if grant.leader_ctx:
            hooks[Stage.GPU_CTX] = grant.resident.ctx_token.set_ready
        self.sim.start_invocation(inv, grant.warmth, plan,
                                  wait_tokens=tuple(tokens), stage_hooks=hooks)
        return True

    def complete(self, inv) -> None:
        ledger = self.sim.gpu_ledgers[inv.gpu]
        for a in inv.allocations:
            ledger.free(a)
        inv.allocations.clear()
        self.sim.sharing.release(inv.spec.name, inv.gpu)
        self._drain_queue(inv.gpu)


def build_policy(sim, cfg: PolicyConfig) -> BasePolicy:
    if cfg.name in ("FixedGSL", "FixedGSLF"):
        return InstancePolicy(sim, cfg)
    if cfg.name == "DGSF":
        return PoolPolicy(sim, cfg)
    return SharingPolicy(sim, cfg)
