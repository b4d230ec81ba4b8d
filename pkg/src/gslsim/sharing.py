"""Sharing-based memory management.

Per-(function, GPU) resident state: an active reference count while
invocations run, then a timed four-stage decay that releases, in order, the
GPU read-only block, the GPU context, the CPU-side cache and context, and
finally the container. An arrival during decay cancels the timer and reuses
whatever is still held; concurrent cold arrivals elect one loader and the
rest wait on its transfer.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Callable, Optional

from .engine import Engine, Event, EventKind, SimulationError, s_to_us
from .functions import FunctionSpec, Token, WarmthClass
from .resources import AllocClass, Allocation, Denied, MemoryLedger


class ResidentState(Enum):
    ACTIVE = "Active"
    STAGE1 = "Stage1"
    STAGE2 = "Stage2"
    STAGE3 = "Stage3"
    STAGE4 = "Stage4"


# order in which forced demotion picks victims: most decayed first
_DEMOTE_ORDER = [ResidentState.STAGE4, ResidentState.STAGE3,
                 ResidentState.STAGE2, ResidentState.STAGE1]


class ResidentFunction:
    __slots__ = ("spec", "gpu", "state", "active_count", "gpu_ro", "gpu_ctx",
                 "cpu_ro_cache", "cpu_ctx_held", "container_held", "exit_timer",
                 "ro_token", "ctx_token", "last_activity_us")

    def __init__(self, spec: FunctionSpec, gpu: int, now: int):
        self.spec = spec
        self.gpu = gpu
        self.state = ResidentState.ACTIVE
        self.active_count = 0
        self.gpu_ro: Optional[Allocation] = None
        self.gpu_ctx: Optional[Allocation] = None
        self.cpu_ro_cache: Optional[Allocation] = None
        self.cpu_ctx_held = True
        self.container_held = True
        self.exit_timer: Optional[Event] = None
        self.ro_token: Optional[Token] = None
        self.ctx_token: Optional[Token] = None
        self.last_activity_us = now


@dataclass
class AdmitPreview:
    """What an admission would grant and what it must newly allocate."""
    warmth: WarmthClass
    shared_ro: bool
    shared_ctx: bool
    wait_ro: bool
    wait_ctx: bool
    alloc_resident_ro_umb: int   # new shared RO block this admission would load
    alloc_resident_ctx_umb: int  # new shared context this admission would create

    @property
    def resident_delta_umb(self) -> int:
        return self.alloc_resident_ro_umb + self.alloc_resident_ctx_umb


@dataclass
class ShareGrant:
    warmth: WarmthClass
    shared_ro: bool
    shared_ctx: bool
    wait_ro: bool
    wait_ctx: bool
    leader_ro: bool   # this invocation's GPU load brings in the shared RO block
    leader_ctx: bool  # this invocation's GPU_CTX stage creates the shared context
    resident: ResidentFunction


class SharingManager:
    """Owns the resident table and all shared allocations on the GPUs."""

    def __init__(self, engine: Engine, gpu_ledgers: list[MemoryLedger],
                 cpu_ledger: MemoryLedger, *, ro_sharing: bool, ctx_sharing: bool,
                 multi_stage_exit: bool, keep_alive_s: float = 0.0,
                 stage_intervals_s=(30.0, 30.0, 30.0, 30.0),
                 on_gpu_freed: Optional[Callable[[int], None]] = None):
        self.engine = engine
        self.gpu_ledgers = gpu_ledgers
        self.cpu_ledger = cpu_ledger
        self.ro_sharing = ro_sharing
        self.ctx_sharing = ctx_sharing
        self.multi_stage_exit = multi_stage_exit
        self.keep_alive_us = s_to_us(keep_alive_s)
        self.stage_intervals_us = [s_to_us(v) for v in stage_intervals_s]
        if len(self.stage_intervals_us) != 4:
            raise ValueError("stage_intervals_s must have four entries")
        self.on_gpu_freed = on_gpu_freed
        self.residents: dict[tuple[str, int], ResidentFunction] = {}
        self.ro_loads_performed: dict[tuple[str, int], int] = {}

    # -- admission ---------------------------------------------------------

    def preview(self, spec: FunctionSpec, gpu: int) -> AdmitPreview:
        r = self.residents.get((spec.name, gpu))
        ro_held = r is not None and r.gpu_ro is not None
        ctx_held = r is not None and r.gpu_ctx is not None
        cpu_held = r is not None and r.cpu_ctx_held
        container_held = r is not None and r.container_held

        ro_ok = spec.ro_mem_mb == 0 or ro_held
        if ro_ok and ctx_held:
            warmth = WarmthClass.STAGE1_HOT
        elif ctx_held:
            warmth = WarmthClass.STAGE2
        elif cpu_held:
            warmth = WarmthClass.STAGE3
        elif container_held:
            warmth = WarmthClass.STAGE4
        else:
            warmth = WarmthClass.COLD

        shared_ro = ro_held
        shared_ctx = ctx_held
        wait_ro = shared_ro and not r.ro_token.ready
        wait_ctx = shared_ctx and not r.ctx_token.ready
        alloc_ro = spec.ro_umb if (self.ro_sharing and spec.ro_mem_mb > 0 and not ro_held) else 0
        alloc_ctx = spec.context_umb if (self.ctx_sharing and not ctx_held) else 0
        return AdmitPreview(warmth, shared_ro, shared_ctx, wait_ro, wait_ctx,
                            alloc_ro, alloc_ctx)

    def admit(self, spec: FunctionSpec, gpu: int, preview: Optional[AdmitPreview] = None) -> ShareGrant:
        """Commit an admission. The caller already checked GPU capacity."""
        now = self.engine.now
        if preview is None:
            preview = self.preview(spec, gpu)
        key = (spec.name, gpu)
        r = self.residents.get(key)
        if r is None:
            r = ResidentFunction(spec, gpu, now)
            self.residents[key] = r
        if r.exit_timer is not None:
            self.engine.cancel(r.exit_timer)
            r.exit_timer = None
        r.state = ResidentState.ACTIVE
        r.active_count += 1
        r.cpu_ctx_held = True
        r.container_held = True
        r.last_activity_us = now

        leader_ro = False
        leader_ctx = False
        if preview.alloc_resident_ro_umb:
            got = self.gpu_ledgers[gpu].try_alloc(preview.alloc_resident_ro_umb,
                                                  AllocClass.READ_ONLY, owner=key)
            if isinstance(got, Denied):
                raise SimulationError(f"admit {key}: RO allocation denied after capacity check")
            r.gpu_ro = got
            r.ro_token = Token(ready=False)
            leader_ro = True
        if preview.alloc_resident_ctx_umb:
            got = self.gpu_ledgers[gpu].try_alloc(preview.alloc_resident_ctx_umb,
                                                  AllocClass.CONTEXT, owner=key)
            if isinstance(got, Denied):
                raise SimulationError(f"admit {key}: context allocation denied after capacity check")
            r.gpu_ctx = got
            r.ctx_token = Token(ready=False)
            leader_ctx = True
        # a warmth that re-transfers RO over PCIe counts as an RO load
        if spec.ro_mem_mb > 0 and preview.warmth is not WarmthClass.STAGE1_HOT:
            self.ro_loads_performed[key] = self.ro_loads_performed.get(key, 0) + 1
        return ShareGrant(preview.warmth, preview.shared_ro, preview.shared_ctx,
                          preview.wait_ro, preview.wait_ctx, leader_ro, leader_ctx, r)

    # -- release and decay -------------------------------------------------

    def release(self, fn_name: str, gpu: int) -> None:
        now = self.engine.now
        r = self.residents.get((fn_name, gpu))
        if r is None or r.state is not ResidentState.ACTIVE or r.active_count < 1:
            raise SimulationError(f"release of non-active resident ({fn_name}, gpu{gpu})")
        r.last_activity_us = now
        if r.active_count > 1:
            r.active_count -= 1
            return
        r.active_count = 0
        if self.multi_stage_exit:
            self._enter_stage(r, ResidentState.STAGE1, self.stage_intervals_us[0])
        elif self.keep_alive_us > 0:
            self._enter_stage(r, ResidentState.STAGE1, self.keep_alive_us)
        else:
            self._evict(r)

    def _enter_stage(self, r: ResidentFunction, state: ResidentState, interval_us: int) -> None:
        r.state = state
        r.exit_timer = self.engine.schedule(
            self.engine.now + interval_us, EventKind.EXIT_TIMER,
            self._on_exit_timer, (r.spec.name, r.gpu))

    def _on_exit_timer(self, key) -> None:
        r = self.residents.get(key)
        if r is None or r.state is ResidentState.ACTIVE:
            raise SimulationError(f"stale exit timer for {key}")
        r.exit_timer = None
        if not self.multi_stage_exit:
            self._evict(r)  # flat keep-alive expiry
            self._notify_freed(r.gpu)
            return
        freed_gpu = self._demote_once(r)
        if freed_gpu:
            self._notify_freed(r.gpu)

    def _demote_once(self, r: ResidentFunction) -> bool:
        """Advance one decay stage. Returns True if GPU memory was freed."""
        gpu_freed = False
        if r.state is ResidentState.STAGE1:
            if r.gpu_ro is not None:
                self.gpu_ledgers[r.gpu].free(r.gpu_ro)
                r.gpu_ro = None
                r.ro_token = None
                gpu_freed = True
            if r.cpu_ro_cache is None and r.spec.ro_mem_mb > 0:
                r.cpu_ro_cache = self.cpu_ledger.try_alloc(
                    r.spec.ro_umb, AllocClass.READ_ONLY, owner=(r.spec.name, r.gpu))
            self._enter_stage(r, ResidentState.STAGE2, self.stage_intervals_us[1])
        elif r.state is ResidentState.STAGE2:
            if r.gpu_ctx is not None:
                self.gpu_ledgers[r.gpu].free(r.gpu_ctx)
                r.gpu_ctx = None
                r.ctx_token = None
                gpu_freed = True
            self._enter_stage(r, ResidentState.STAGE3, self.stage_intervals_us[2])
        elif r.state is ResidentState.STAGE3:
            if r.cpu_ro_cache is not None:
                self.cpu_ledger.free(r.cpu_ro_cache)
                r.cpu_ro_cache = None
            r.cpu_ctx_held = False
            self._enter_stage(r, ResidentState.STAGE4, self.stage_intervals_us[3])
        elif r.state is ResidentState.STAGE4:
            self._evict(r)
            gpu_freed = True
        return gpu_freed

    def _evict(self, r: ResidentFunction) -> None:
        if r.exit_timer is not None:
            self.engine.cancel(r.exit_timer)
            r.exit_timer = None
        if r.gpu_ro is not None:
            self.gpu_ledgers[r.gpu].free(r.gpu_ro)
            r.gpu_ro = None
        if r.gpu_ctx is not None:
            self.gpu_ledgers[r.gpu].free(r.gpu_ctx)
            r.gpu_ctx = None
        if r.cpu_ro_cache is not None:
            self.cpu_ledger.free(r.cpu_ro_cache)
            r.cpu_ro_cache = None
        r.cpu_ctx_held = False
        r.container_held = False
        del self.residents[(r.spec.name, r.gpu)]

    def _notify_freed(self, gpu: int) -> None:
        if self.on_gpu_freed is not None:
            self.on_gpu_freed(gpu)

    # -- memory pressure ---------------------------------------------------

    def force_demote(self, gpu: int, need_umb: int, exclude_fn: str) -> bool:
        """Demote staged residents (most decayed first, LRU within a stage)
        until `need_umb` fits on the GPU ledger. Never touches Active
        residents or the function being admitted. Does NOT raise the
        memory-freed notification: the caller is mid-admission and about to
        consume the freed bytes itself."""
        ledger = self.gpu_ledgers[gpu]
        while not ledger.fits(need_umb):
            victim = self._pick_victim(gpu, exclude_fn)
            if victim is None:
                return False
            if victim.exit_timer is not None:
                self.engine.cancel(victim.exit_timer)
                victim.exit_timer = None
            self._demote_once(victim)
        return True

    def _pick_victim(self, gpu: int, exclude_fn: str) -> Optional[ResidentFunction]:
        # only Stage1/Stage2 residents still hold GPU memory
        for state in _DEMOTE_ORDER:
            if state in (ResidentState.STAGE4, ResidentState.STAGE3):
                continue
            candidates = [r for r in self.residents.values()
                          if r.gpu == gpu and r.state is state and r.spec.name != exclude_fn
                          and (r.gpu_ro is not None or r.gpu_ctx is not None)]
            if candidates:
                return min(candidates, key=lambda r: r.last_activity_us)
        return None

    # -- reporting ---------------------------------------------------------

    def resident_memory_umb(self, gpu: int) -> dict[AllocClass, int]:
        return self.gpu_ledgers[gpu].usage_by_class()

    def check_consistency(self) -> None:
        """Assert every resident's holdings match its state's required set."""
        for (name, gpu), r in self.residents.items():
            spec = r.spec
            ro_expected = self.ro_sharing and spec.ro_mem_mb > 0
            ctx_expected = self.ctx_sharing
            st = r.state
            if st is ResidentState.ACTIVE:
                assert r.active_count >= 1 and r.exit_timer is None
            else:
                assert r.active_count == 0 and r.exit_timer is not None and not r.exit_timer.cancelled
            if st in (ResidentState.ACTIVE, ResidentState.STAGE1):
                assert (r.gpu_ro is not None) == ro_expected, (name, gpu, st)
                assert (r.gpu_ctx is not None) == ctx_expected, (name, gpu, st)
                assert r.cpu_ctx_held and r.container_held
            elif st is ResidentState.STAGE2:
                assert r.gpu_ro is None
                assert (r.gpu_ctx is not None) == ctx_expected
                assert (r.cpu_ro_cache is not None) == (spec.ro_mem_mb > 0 and self.multi_stage_exit)
                assert r.cpu_ctx_held and r.container_held
            elif st is ResidentState.STAGE3:
                assert r.gpu_ro is None and r.gpu_ctx is None
                assert (r.cpu_ro_cache is not None) == (spec.ro_mem_mb > 0 and self.multi_stage_exit)
                assert r.cpu_ctx_held and r.container_held
            elif st is ResidentState.STAGE4:
                assert r.gpu_ro is None and r.gpu_ctx is None and r.cpu_ro_cache is None
                assert not r.cpu_ctx_held and r.container_held
            if r.gpu_ro is not None:
                assert r.gpu_ro.requested_umb == spec.ro_umb
            if r.gpu_ctx is not None:
                assert r.gpu_ctx.requested_umb == spec.context_umb
