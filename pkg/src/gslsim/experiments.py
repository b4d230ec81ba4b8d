"""Experiment drivers behind the CLI: single runs, policy comparisons on a
shared arrival stream, peak-throughput searches, and the bundled
calibration validation."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

from .config import ExperimentConfig, build_simulation
from .engine import US_PER_MS, s_to_us
from .functions import PlanMode
from .metrics import (RunSummary, summarize, write_invocations_csv,
                      write_timeline_csv)
from .policies import policy_preset
from .simulation import Simulation
from .workload import (ClosedLoopSpec, PeakSearchResult, PoissonOpenSpec,
                       find_peak_throughput, generate_arrivals, probe_stats)


@dataclass
class RunResult:
    sim: Simulation
    summary: RunSummary

    def digest(self) -> str:
        s = self.summary
        mean = f"{s.mean_latency_ms:.1f}" if s.mean_latency_ms is not None else "n/a"
        p99 = f"{s.p99_latency_ms:.1f}" if s.p99_latency_ms is not None else "n/a"
        return (f"throughput={s.throughput_per_s:.3f}/s mean={mean}ms p99={p99}ms "
                f"completed={s.completed}/{s.arrivals}")


def run_experiment(cfg: ExperimentConfig, out_dir: Optional[str] = None,
                   arrivals=None, log_events: bool = False) -> RunResult:
    sim = build_simulation(cfg, arrivals=arrivals, log_events=log_events)
    sim.run()
    summary = summarize(sim.invocations, cfg.duration_us, cfg.spec_table,
                        channels=[sim.host_channel] + sim.pcie_channels,
                        timelines=sim.timelines)
    result = RunResult(sim, summary)
    if out_dir is not None:
        write_artifacts(result, out_dir)
    return result


def write_artifacts(result: RunResult, out_dir: str) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "summary.json").write_text(result.summary.to_json(), encoding="utf-8")
    write_invocations_csv(out / "invocations.csv", result.sim.invocations)
    write_timeline_csv(out / "memory_timeline.csv", result.sim.timelines)


def _resolve_policies(cfg: ExperimentConfig, policies) -> list[tuple[str, object]]:
    entries = policies if policies else cfg.compare_policies
    if not entries:
        entries = [cfg.policy.name]
    resolved = []
    for entry in entries:
        if isinstance(entry, str):
            resolved.append((entry, policy_preset(entry)))
        else:
            name = entry["policy"]
            overrides = {k: v for k, v in entry.items() if k not in ("policy", "label")}
            pol = policy_preset(name).with_overrides(**overrides)
            resolved.append((entry.get("label", name), pol))
    return resolved


def compare_policies(cfg: ExperimentConfig, policies=None,
                     out_dir: Optional[str] = None) -> dict:
    """Run several policies on one identical arrival stream.

    The stream is generated before any policy runs, so latency/throughput/
    memory differences are attributable to the policy alone. Closed-loop
    workloads re-draw per policy from the same seed (arrival times then
    depend on completions by construction).
    """
    resolved = _resolve_policies(cfg, policies)
    arrivals = None
    if not isinstance(cfg.workload, ClosedLoopSpec):
        arrivals = generate_arrivals(cfg.workload, cfg.seed,
                                     known_functions=set(cfg.spec_table))
    rows = []
    results = {}
    for label, policy in resolved:
        sub_out = str(Path(out_dir) / label) if out_dir else None
        result = run_experiment(cfg.with_policy(policy), out_dir=sub_out,
                                arrivals=arrivals)
        results[label] = result
        s = result.summary
        avg_mem = sum(g["avg_mb"] for g in s.gpu_memory.values())
        rows.append({"policy": label,
                     "throughput_per_s": s.throughput_per_s,
                     "mean_latency_ms": s.mean_latency_ms,
                     "p99_latency_ms": s.p99_latency_ms,
                     "avg_gpu_memory_mb": avg_mem,
                     "completed": s.completed,
                     "per_function": s.per_function})
    base = rows[0]
    for row in rows:
        row["mean_latency_ratio"] = _ratio(row["mean_latency_ms"], base["mean_latency_ms"])
        row["p99_latency_ratio"] = _ratio(row["p99_latency_ms"], base["p99_latency_ms"])
        row["throughput_ratio"] = _ratio(row["throughput_per_s"], base["throughput_per_s"])
        row["memory_ratio"] = _ratio(row["avg_gpu_memory_mb"], base["avg_gpu_memory_mb"])
        row["per_function_mean_ratio"] = {
            fn: _ratio(stats["mean_ms"], base["per_function"].get(fn, {}).get("mean_ms"))
            for fn, stats in row["per_function"].items()}
    table = {"baseline": rows[0]["policy"], "rows": rows}
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "comparison.json").write_text(
            json.dumps(table, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return {"table": table, "results": results}


def _ratio(value, base):
    if value is None or base in (None, 0):
        return None
    return value / base


def peak_search(cfg: ExperimentConfig, *, rate_min: float = 0.5,
                rate_ceiling: float = 4096.0, resolution: float = 0.01,
                p99_growth_limit: float = 2.0, queue_sample_fraction: float = 0.1,
                out_dir: Optional[str] = None) -> PeakSearchResult:
    """Binary-search the largest stable open-loop rate for cfg's policy."""
    base = cfg.workload
    if not isinstance(base, PoissonOpenSpec):
        raise ValueError("peak search requires a poisson_open workload template")
    probe_duration_us = s_to_us(base.duration_s)

    def probe(rate: float):
        wl = PoissonOpenSpec(rate_per_s=rate, duration_s=base.duration_s, mix=base.mix)
        probe_cfg = replace(cfg.with_workload(wl), duration_us=probe_duration_us)
        sim = build_simulation(probe_cfg)
        sim.run()
        return probe_stats(sim, probe_duration_us)

    result = find_peak_throughput(probe, rate_min=rate_min, rate_ceiling=rate_ceiling,
                                  resolution=resolution, p99_growth_limit=p99_growth_limit)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "peak_trajectory.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["rate_per_s", "stable"])
            for rate, ok in result.trajectory:
                w.writerow([format(rate, ".6f"), int(ok)])
    return result


# Reference solo-latency decomposition for the bundled resnet50 calibration,
# one row per warmth class of the staged-exit probe (tolerance 0.1 ms).
VALIDATION_REFERENCE_MS = [
    ("Baseline", "Cold", 399.4),
    ("stage 1", "Stage1Hot", 28.9),
    ("stage 2", "Stage2", 49.7),
    ("stage 3", "Stage3", 309.5),
    ("stage 4", "Stage4", 309.5),
    ("cold", "Cold", 310.5),
]


def validate_calibration(cfg: ExperimentConfig, tolerance_ms: float = 0.1) -> dict:
    """Replay the staged warm-state probe and check each solo latency against
    the bundled calibration reference."""
    parallel = run_experiment(cfg).sim
    serial = run_experiment(cfg.with_policy(
        cfg.policy.with_overrides(plan_mode=PlanMode.SERIAL))).sim

    probes = sorted((i for i in parallel.invocations if i.outcome == "completed"),
                    key=lambda i: i.arrival_us)
    if len(probes) != 6 or not serial.invocations:
        raise RuntimeError("validation scenario did not complete its six probes")
    measured = [("Baseline", serial.invocations[0])]
    measured += [(label, inv) for (label, _, _), inv
                 in zip(VALIDATION_REFERENCE_MS[1:], probes[1:])]
    rows = []
    ok = True
    for (label, want_warmth, want_ms), (_, inv) in zip(VALIDATION_REFERENCE_MS, measured):
        got_ms = inv.latency_us / US_PER_MS
        warmth = inv.warmth.label()
        passed = abs(got_ms - want_ms) <= tolerance_ms and warmth == want_warmth
        ok = ok and passed
        rows.append({"row": label, "expected_ms": want_ms, "measured_ms": got_ms,
                     "warmth": warmth, "expected_warmth": want_warmth, "pass": passed})
    return {"pass": ok, "rows": rows}
