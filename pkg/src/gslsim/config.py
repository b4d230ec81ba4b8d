"""Experiment configuration: strict JSON parsing, bundled scenarios, and
construction of ready-to-run simulations."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources as importlib_resources
from pathlib import Path
from typing import Optional

from .engine import s_to_us
from .functions import builtin_spec_table, load_spec_table
from .policies import PolicyConfig, policy_preset
from .simulation import ClusterSpec, Simulation
from .workload import (ArrivalRecord, ClosedLoopSpec, ClosedLoopSource,
                       OpenLoopSource, PoissonOpenSpec, SequenceSpec,
                       TraceSpec, generate_arrivals)


class ConfigError(ValueError):
    """Invalid experiment configuration; the message names the field."""


_CLUSTER_KEYS = {"gpus", "gpu_mem_mb", "pcie_bw_mbps", "host_bw_mbps",
                 "cpu_mem_mb", "compute_concurrency", "pre_warmed_containers"}
_ABLATION_KEYS = {"plan_mode", "ro_sharing", "ctx_sharing", "multi_stage_exit",
                  "granularity_mb", "dgsf_ctx_ttl_s", "keep_alive_s", "stage_interval_s"}
_TOP_KEYS = ({"cluster", "functions", "policy", "workload", "seed", "duration_s",
              "out_dir", "compare_policies"} | _ABLATION_KEYS)
_WORKLOAD_KEYS = {
    "poisson_open": {"kind", "rate_per_s", "duration_s", "mix"},
    "closed_loop": {"kind", "concurrency", "count", "mix"},
    "trace": {"kind", "path", "time_scale"},
    "sequence": {"kind", "arrivals"},
}


@dataclass
class ExperimentConfig:
    cluster: ClusterSpec
    spec_table: dict
    policy: PolicyConfig
    workload: object
    seed: int
    duration_us: int
    out_dir: Optional[str] = None
    compare_policies: list = field(default_factory=list)
    raw: dict = field(default_factory=dict)

    def with_policy(self, policy: PolicyConfig) -> "ExperimentConfig":
        return ExperimentConfig(self.cluster, self.spec_table, policy, self.workload,
                                self.seed, self.duration_us, self.out_dir,
                                self.compare_policies, self.raw)

    def with_workload(self, workload) -> "ExperimentConfig":
        return ExperimentConfig(self.cluster, self.spec_table, self.policy, workload,
                                self.seed, self.duration_us, self.out_dir,
                                self.compare_policies, self.raw)


def _reject_unknown(mapping: dict, allowed: set, where: str) -> None:
    unknown = set(mapping) - allowed
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {sorted(unknown)}")


def _parse_mix(mix, spec_table) -> dict:
    if mix in (None, "uniform"):
        return {name: 1.0 for name in spec_table}
    if not isinstance(mix, dict) or not mix:
        raise ConfigError("workload.mix: expected 'uniform' or a non-empty mapping")
    for name in mix:
        if name not in spec_table:
            raise ConfigError(f"workload.mix: unknown function {name!r}")
    return dict(mix)


def _parse_workload(data, spec_table, default_duration_s):
    if not isinstance(data, dict) or "kind" not in data:
        raise ConfigError("workload: expected an object with a 'kind'")
    kind = data["kind"]
    if kind not in _WORKLOAD_KEYS:
        raise ConfigError(f"workload.kind: unknown kind {kind!r}")
    _reject_unknown(data, _WORKLOAD_KEYS[kind], "workload")
    try:
        if kind == "poisson_open":
            return PoissonOpenSpec(rate_per_s=float(data["rate_per_s"]),
                                   duration_s=float(data.get("duration_s", default_duration_s)),
                                   mix=_parse_mix(data.get("mix"), spec_table))
        if kind == "closed_loop":
            return ClosedLoopSpec(concurrency=int(data["concurrency"]),
                                  count=int(data["count"]),
                                  mix=_parse_mix(data.get("mix"), spec_table))
        if kind == "trace":
            return TraceSpec(path=str(data["path"]),
                             time_scale=float(data.get("time_scale", 1.0)))
        arrivals = data.get("arrivals")
        if not isinstance(arrivals, list):
            raise ConfigError("workload.arrivals: expected a list of [ms, function] pairs")
        pairs = []
        for i, item in enumerate(arrivals):
            if (not isinstance(item, (list, tuple)) or len(item) != 2):
                raise ConfigError(f"workload.arrivals[{i}]: expected [ms, function]")
            ms, fn = item
            if fn not in spec_table:
                raise ConfigError(f"workload.arrivals[{i}]: unknown function {fn!r}")
            pairs.append((float(ms), fn))
        return SequenceSpec(arrivals=tuple(pairs))
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"workload: {exc}") from exc


def parse_config(data: dict) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("config: expected a JSON object")
    _reject_unknown(data, _TOP_KEYS, "config")

    cluster_data = data.get("cluster", {})
    _reject_unknown(cluster_data, _CLUSTER_KEYS, "cluster")
    try:
        cluster = ClusterSpec(**cluster_data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"cluster: {exc}") from exc

    functions = data.get("functions", "builtin")
    if functions == "builtin":
        spec_table = builtin_spec_table()
    else:
        try:
            spec_table = load_spec_table(functions)
        except (OSError, ValueError) as exc:
            raise ConfigError(f"functions: {exc}") from exc

    policy_name = data.get("policy", "SAGE")
    try:
        policy = policy_preset(policy_name)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    ablations = {k: data[k] for k in _ABLATION_KEYS if k in data}
    if ablations:
        try:
            policy = policy.with_overrides(**ablations)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"policy overrides: {exc}") from exc

    duration_s = data.get("duration_s", 60.0)
    if not isinstance(duration_s, (int, float)) or duration_s <= 0:
        raise ConfigError("duration_s: must be a positive number")
    workload = _parse_workload(data.get("workload", {"kind": "poisson_open", "rate_per_s": 1.0}),
                               spec_table, duration_s)

    seed = data.get("seed", 0)
    if not isinstance(seed, int) or seed < 0:
        raise ConfigError("seed: must be a non-negative integer")

    compare = data.get("compare_policies", [])
    if not isinstance(compare, list):
        raise ConfigError("compare_policies: expected a list")

    return ExperimentConfig(cluster=cluster, spec_table=spec_table, policy=policy,
                            workload=workload, seed=seed,
                            duration_us=s_to_us(duration_s),
                            out_dir=data.get("out_dir"), compare_policies=compare,
                            raw=data)


def bundled_config_names() -> list[str]:
    root = importlib_resources.files("gslsim") / "configs"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".json"))


def load_config(path_or_name: str) -> ExperimentConfig:
    """Load a config file, or a bundled scenario by bare name."""
    p = Path(path_or_name)
    if p.exists():
        text = p.read_text(encoding="utf-8")
    else:
        res = importlib_resources.files("gslsim") / "configs" / f"{path_or_name}.json"
        if not res.is_file():
            raise ConfigError(
                f"config {path_or_name!r} is neither a file nor a bundled scenario "
                f"(bundled: {', '.join(bundled_config_names())})")
        text = res.read_text(encoding="utf-8")
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path_or_name}: invalid JSON: {exc}") from exc
    return parse_config(data)


def apply_overrides(data: dict, overrides: list[str]) -> dict:
    """Apply `dotted.path=value` overrides to a raw config mapping."""
    out = json.loads(json.dumps(data))  # deep copy
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r}: expected key=value")
        key, _, raw_value = item.partition("=")
        try:
            value = json.loads(raw_value)
        except json.JSONDecodeError:
            value = raw_value
        node = out
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {item!r}: {part} is not an object")
        node[parts[-1]] = value
    return out


def build_source(cfg: ExperimentConfig, arrivals: Optional[list[ArrivalRecord]] = None):
    """Instantiate the workload source (pre-generated stream or closed loop)."""
    if isinstance(cfg.workload, ClosedLoopSpec):
        return ClosedLoopSource(cfg.workload, cfg.seed)
    if arrivals is None:
        arrivals = generate_arrivals(cfg.workload, cfg.seed,
                                     known_functions=set(cfg.spec_table))
    return OpenLoopSource(arrivals)


def workload_functions(cfg: ExperimentConfig, source) -> list[str]:
    """Functions this workload can emit (what DGSF pre-registers)."""
    wl = cfg.workload
    if isinstance(wl, (PoissonOpenSpec, ClosedLoopSpec)):
        return sorted(wl.mix)
    return list(source.functions)


def build_simulation(cfg: ExperimentConfig,
                     arrivals: Optional[list[ArrivalRecord]] = None,
                     log_events: bool = False) -> Simulation:
    source = build_source(cfg, arrivals)
    return Simulation(cfg.cluster, cfg.policy, cfg.spec_table, source,
                      cfg.seed, cfg.duration_us, log_events=log_events,
                      register_functions=workload_functions(cfg, source))
