"""Function calibration records and per-invocation stage plans.

The per-function record carries memory footprints (context / read-only /
writable), the byte counts moved over the host-load and PCIe paths on cold
versus warm starts, and the fixed service times of the non-transfer stages.
plan_invocation() turns a (function, warmth, mode) triple into the stage
DAG that the executor walks; execute_plan() drives that DAG on the event
loop, charging loads to the contended channels.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields
from enum import Enum, IntEnum
from functools import lru_cache
from typing import Callable, Optional

from .engine import Engine, EventKind, SimulationError, ms_to_us
from .resources import Channel, mb_to_umb


class WarmthClass(IntEnum):
    """Retained-state class at admission; ordered by how much is retained."""
    COLD = 0
    STAGE4 = 1
    STAGE3 = 2
    STAGE2 = 3
    STAGE1_HOT = 4

    def label(self) -> str:
        return _WARMTH_LABELS[self]


_WARMTH_LABELS = {
    WarmthClass.COLD: "Cold",
    WarmthClass.STAGE4: "Stage4",
    WarmthClass.STAGE3: "Stage3",
    WarmthClass.STAGE2: "Stage2",
    WarmthClass.STAGE1_HOT: "Stage1Hot",
}


@dataclass(frozen=True)
class FunctionSpec:
    """Calibration of one GPU function (memory in MB, times in ms)."""

    name: str
    ro_mem_mb: float
    writable_mem_mb: float
    compute_ms: float
    context_mem_mb: float = 414.0
    ro_bytes_host_mb: Optional[float] = None  # bytes moved on a cold load; defaults below
    ro_bytes_pcie_mb: Optional[float] = None
    input_bytes_host_mb: Optional[float] = None  # per-invocation payload
    input_bytes_pcie_mb: Optional[float] = None
    container_ms: float = 0.0
    cpu_ctx_ms: float = 1.0
    gpu_ctx_ms: float = 285.1
    return_ms: float = 0.1

    def __post_init__(self):
        explicit = self.ro_mem_mb + self.writable_mem_mb
        if self.input_bytes_host_mb is None:
            object.__setattr__(self, "input_bytes_host_mb", round(0.05 * explicit, 6))
        if self.input_bytes_pcie_mb is None:
            object.__setattr__(self, "input_bytes_pcie_mb", round(0.05 * explicit, 6))
        if self.ro_bytes_host_mb is None:
            object.__setattr__(self, "ro_bytes_host_mb", self.ro_mem_mb)
        if self.ro_bytes_pcie_mb is None:
            object.__setattr__(self, "ro_bytes_pcie_mb", self.ro_mem_mb)
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name != "name" and v < 0:
                raise ValueError(f"function {self.name}: field {f.name} must be non-negative")
        if self.context_mem_mb <= 0:
            raise ValueError(f"function {self.name}: context_mem_mb must be positive")

    @property
    def explicit_mem_mb(self) -> float:
        return self.ro_mem_mb + self.writable_mem_mb

    # fixed-point views used by the allocator and channels
    @property
    def context_umb(self) -> int:
        return mb_to_umb(self.context_mem_mb)

    @property
    def ro_umb(self) -> int:
        return mb_to_umb(self.ro_mem_mb)

    @property
    def writable_umb(self) -> int:
        return mb_to_umb(self.writable_mem_mb)

    @property
    def instance_umb(self) -> int:
        """Footprint of one instance-fixed allocation (context + explicit)."""
        return self.context_umb + self.ro_umb + self.writable_umb


_ALLOWED_FIELDS = {
    "ro_mem_mb", "writable_mem_mb", "compute_ms", "context_mem_mb",
    "ro_bytes_host_mb", "ro_bytes_pcie_mb", "input_bytes_host_mb",
    "input_bytes_pcie_mb", "container_ms", "cpu_ctx_ms", "gpu_ctx_ms", "return_ms",
}
_REQUIRED_FIELDS = ("ro_mem_mb", "writable_mem_mb", "compute_ms")


def spec_from_dict(name: str, record: dict) -> FunctionSpec:
    unknown = set(record) - _ALLOWED_FIELDS
    if unknown:
        raise ValueError(f"function {name}: unknown field(s) {sorted(unknown)}")
    for req in _REQUIRED_FIELDS:
        if req not in record:
            raise ValueError(f"function {name}: missing field {req}")
    try:
        return FunctionSpec(name=name, **record)
    except TypeError as exc:
        raise ValueError(f"function {name}: {exc}") from exc


def load_spec_table(source) -> dict[str, FunctionSpec]:
    """Parse a spec table from a path or an already-decoded mapping."""
    if isinstance(source, dict):
        data = source
    else:
        with open(source, "r", encoding="utf-8") as fh:
            data = json.load(fh)
        if not isinstance(data, dict):
            raise ValueError("function spec file must be a JSON object of name -> record")
    return {name: spec_from_dict(name, rec) for name, rec in data.items()}


def _builtin(name, ro, writable, input_host=None, input_pcie=None):
    # cold loads move the full explicit footprint; warm loads move only the
    # per-invocation input, so the cold RO byte count is explicit - input
    explicit = round(ro + writable, 6)
    ih = input_host if input_host is not None else round(0.05 * explicit, 6)
    ip = input_pcie if input_pcie is not None else round(0.05 * explicit, 6)
    return FunctionSpec(
        name=name, ro_mem_mb=ro, writable_mem_mb=writable, compute_ms=24.3,
        ro_bytes_host_mb=round(explicit - ih, 6), ro_bytes_pcie_mb=round(explicit - ip, 6),
        input_bytes_host_mb=ih, input_bytes_pcie_mb=ip)


def builtin_spec_table() -> dict[str, FunctionSpec]:
    """The ten-benchmark calibration table shipped with the simulator."""
    specs = [
        _builtin("bert", 1282.5, 60.1),
        _builtin("deepspeech", 24.8, 6.9),
        _builtin("inception3", 91.1, 11.7),
        _builtin("nasnet", 20.3, 11.8),
        _builtin("resnet50", 97.7, 11.9, input_host=5.9, input_pcie=4.5),
        _builtin("seq2seq", 6.1, 0.1),
        _builtin("vgg11", 506.8, 38.0),
        _builtin("lbm", 0.0, 330.0),
        _builtin("mrif", 0.0, 22.0),
        _builtin("tpacf", 0.1, 28.2),
    ]
    return {s.name: s for s in specs}


class Stage(Enum):
    CONTAINER = "container"
    CPU_CTX = "cpu_ctx"
    CPU_LOAD = "cpu_load"
    GPU_CTX = "gpu_ctx"
    GPU_LOAD = "gpu_load"
    SYNC_WAIT = "sync_wait"
    COMPUTE = "compute"
    RETURN = "return"


STAGE_ORDER = [Stage.CONTAINER, Stage.CPU_CTX, Stage.CPU_LOAD, Stage.GPU_CTX,
               Stage.GPU_LOAD, Stage.SYNC_WAIT, Stage.COMPUTE, Stage.RETURN]


@dataclass
class StageNode:
    stage: Stage
    preds: set = field(default_factory=set)
    duration_us: int = 0
    bytes_umb: int = 0   # CPU_LOAD / GPU_LOAD only
    channel: str = ""    # "host" or "pcie"


@dataclass
class StagePlan:
    nodes: list
    wait_ro: bool = False
    wait_ctx: bool = False

    def node_index(self, stage: Stage) -> Optional[int]:
        for i, n in enumerate(self.nodes):
            if n.stage is stage:
                return i
        return None


class PlanMode(Enum):
    SERIAL = "Serial"
    PARALLEL = "Parallel"


# loads required per warmth class: (cpu_ctx stage?, host bytes include RO?,
# pcie bytes include RO?, gpu_ctx stage?)
_WARMTH_RULES = {
    WarmthClass.COLD:      (True,  True,  True,  True),
    WarmthClass.STAGE4:    (False, True,  True,  True),
    WarmthClass.STAGE3:    (False, False, True,  True),
    WarmthClass.STAGE2:    (False, False, True,  False),
    WarmthClass.STAGE1_HOT: (False, False, False, False),
}


def plan_invocation(spec: FunctionSpec, warmth: WarmthClass, mode: PlanMode,
                    pre_warmed: bool = True, ctx_external: bool = False,
                    wait_ro: bool = False, wait_ctx: bool = False) -> StagePlan:
    """Build the stage DAG for one invocation.

    Serial mode chains every required stage; Parallel mode runs GPU context
    creation beside the CPU-load -> GPU-load chain, joining before compute.
    ctx_external marks a pre-created context (pool slot), which removes the
    GPU_CTX node entirely. wait_ro / wait_ctx add a readiness barrier before
    compute for followers that reuse a leader's in-flight load or context.

    Plans are immutable once built and cached per argument tuple; executors
    only read them.
    """
    return _plan_cached(spec, warmth, mode, pre_warmed, ctx_external, wait_ro, wait_ctx)


@lru_cache(maxsize=4096)
def _plan_cached(spec: FunctionSpec, warmth: WarmthClass, mode: PlanMode,
                 pre_warmed: bool, ctx_external: bool,
                 wait_ro: bool, wait_ctx: bool) -> StagePlan:
    need_cpu_ctx, host_ro, pcie_ro, need_gpu_ctx = _WARMTH_RULES[warmth]
    if ctx_external:
        need_gpu_ctx = False
    host_umb = mb_to_umb(spec.input_bytes_host_mb) + (mb_to_umb(spec.ro_bytes_host_mb) if host_ro else 0)
    pcie_umb = mb_to_umb(spec.input_bytes_pcie_mb) + (mb_to_umb(spec.ro_bytes_pcie_mb) if pcie_ro else 0)

    nodes: list[StageNode] = []

    def add(stage, preds, **kw):
        nodes.append(StageNode(stage=stage, preds=set(preds), **kw))
        return len(nodes) - 1

    base = []
    if warmth is WarmthClass.COLD and not pre_warmed:
        base.append(add(Stage.CONTAINER, [], duration_us=ms_to_us(spec.container_ms)))
    if need_cpu_ctx:
        base.append(add(Stage.CPU_CTX, base[-1:], duration_us=ms_to_us(spec.cpu_ctx_ms)))
    head = base[-1:]  # predecessor of the first load / ctx node

    cpu_load = add(Stage.CPU_LOAD, head, bytes_umb=host_umb, channel="host")
    if need_gpu_ctx:
        if mode is PlanMode.PARALLEL:
            gpu_ctx = add(Stage.GPU_CTX, head, duration_us=ms_to_us(spec.gpu_ctx_ms))
        else:
            gpu_ctx = add(Stage.GPU_CTX, [cpu_load], duration_us=ms_to_us(spec.gpu_ctx_ms))
    else:
        gpu_ctx = None
    gpu_load_preds = [cpu_load]
    if gpu_ctx is not None and mode is PlanMode.SERIAL:
        gpu_load_preds = [gpu_ctx]
    gpu_load = add(Stage.GPU_LOAD, gpu_load_preds, bytes_umb=pcie_umb, channel="pcie")

    compute_preds = [gpu_load]
    if gpu_ctx is not None:
        compute_preds.append(gpu_ctx)
    if wait_ro or wait_ctx:
        barrier = add(Stage.SYNC_WAIT, compute_preds)
        compute_preds = [barrier]
    compute = add(Stage.COMPUTE, compute_preds, duration_us=ms_to_us(spec.compute_ms))
    add(Stage.RETURN, [compute], duration_us=ms_to_us(spec.return_ms))
    return StagePlan(nodes=nodes, wait_ro=wait_ro, wait_ctx=wait_ctx)


class Token:
    """One-shot readiness flag (leader's RO load / context creation)."""

    __slots__ = ("ready", "_subs")

    def __init__(self, ready: bool = False):
        self.ready = ready
        self._subs: list[Callable[[int], None]] = []

    def subscribe(self, cb: Callable[[int], None]) -> None:
        if self.ready:
            raise SimulationError("subscribe to an already-ready token")
        self._subs.append(cb)

    def set_ready(self, now: int) -> None:
        if self.ready:
            return
        self.ready = True
        subs, self._subs = self._subs, []
        for cb in subs:
            cb(now)


class ComputeGate:
    """Optional per-GPU cap on concurrently computing invocations (FIFO)."""

    def __init__(self, slots: int):
        self.slots = slots
        self._busy = 0
        self._waiters: list[Callable[[int], None]] = []

    def acquire(self, now: int, cb: Callable[[int], None]) -> None:
        if self._busy < self.slots:
            self._busy += 1
            cb(now)
        else:
            self._waiters.append(cb)

    def release(self, now: int) -> None:
        if self._waiters:
            self._waiters.pop(0)(now)
        else:
            self._busy -= 1

    @property
    def queued(self) -> int:
        return len(self._waiters)


@dataclass
class ExecutionContext:
    """Everything a plan needs from its surroundings."""
    engine: Engine
    host_channel: Channel
    pcie_channel: Channel
    compute_gate: Optional[ComputeGate] = None
    wait_tokens: tuple = ()            # Tokens gating the SYNC_WAIT barrier
    stage_hooks: dict = field(default_factory=dict)  # Stage -> callable(now)


class PlanExecution:
    """Walks a StagePlan on the event loop.

    Each node starts the instant its predecessors finish; fixed-time nodes
    complete after their service time, load nodes when their channel
    transfer drains. Per-node begin/end instants land on the invocation.
    """

    def __init__(self, plan: StagePlan, invocation, ctx: ExecutionContext,
                 on_done: Callable[[object, int], None]):
        self.plan = plan
        self.inv = invocation
        self.ctx = ctx
        self.on_done = on_done
        self._remaining = len(plan.nodes)
        self._pred_left = [len(n.preds) for n in plan.nodes]
        self._succs: list[list[int]] = [[] for _ in plan.nodes]
        for i, n in enumerate(plan.nodes):
            for p in n.preds:
                self._succs[p].append(i)

    def start(self) -> None:
        now = self.ctx.engine.now
        # snapshot the roots: the cascade below can make more nodes ready
        roots = [i for i, left in enumerate(self._pred_left) if left == 0]
        for i in roots:
            self._start_node(i, now)

    def _start_node(self, idx: int, now: int) -> None:
        node = self.plan.nodes[idx]
        self.inv.stage_begin(node.stage, now)
        stage = node.stage
        if stage in (Stage.CPU_LOAD, Stage.GPU_LOAD):
            if node.bytes_umb == 0:
                self._finish_node(idx, now)
                return
            channel = self.ctx.host_channel if node.channel == "host" else self.ctx.pcie_channel
            self.inv.add_bytes(node.channel, node.bytes_umb)
            channel.begin_transfer(node.bytes_umb, owner=self.inv,
                                   on_complete=lambda _t, t_now, i=idx: self._finish_node(i, t_now))
        elif stage is Stage.SYNC_WAIT:
            self._await_tokens(idx, now)
        elif stage is Stage.COMPUTE and self.ctx.compute_gate is not None:
            self.ctx.compute_gate.acquire(now, lambda t_now, i=idx: self._run_compute(i, t_now))
        else:
            self._schedule_fixed(idx, node.duration_us, now)

    def _run_compute(self, idx: int, now: int) -> None:
        node = self.plan.nodes[idx]
        self.ctx.engine.schedule(now + node.duration_us, EventKind.STAGE_COMPLETE,
                                 lambda _p, i=idx: self._compute_done(i))

    def _compute_done(self, idx: int) -> None:
        now = self.ctx.engine.now
        self.ctx.compute_gate.release(now)
        self._finish_node(idx, now)

    def _schedule_fixed(self, idx: int, duration_us: int, now: int) -> None:
        if duration_us == 0:
            self._finish_node(idx, now)
        else:
            self.ctx.engine.schedule(now + duration_us, EventKind.STAGE_COMPLETE,
                                     lambda _p, i=idx: self._finish_node(i, self.ctx.engine.now))

    def _await_tokens(self, idx: int, now: int) -> None:
        pending = [t for t in self.ctx.wait_tokens if not t.ready]
        if not pending:
            self._finish_node(idx, now)
            return
        state = {"left": len(pending)}

        def on_ready(t_now: int) -> None:
            state["left"] -= 1
            if state["left"] == 0:
                self._finish_node(idx, t_now)

        for tok in pending:
            tok.subscribe(on_ready)

    def _finish_node(self, idx: int, now: int) -> None:
        node = self.plan.nodes[idx]
        self.inv.stage_end(node.stage, now)
        hook = self.ctx.stage_hooks.get(node.stage)
        if hook is not None:
            hook(now)
        self._remaining -= 1
        if self._remaining == 0:
            self.on_done(self.inv, now)
            return
        for s in self._succs[idx]:
            self._pred_left[s] -= 1
            if self._pred_left[s] == 0:
                self._start_node(s, now)


def execute_plan(plan: StagePlan, invocation, ctx: ExecutionContext,
                 on_done: Callable[[object, int], None]) -> PlanExecution:
    ex = PlanExecution(plan, invocation, ctx, on_done)
    ex.start()
    return ex
