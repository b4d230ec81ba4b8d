"""Command-line experiment runner.

Subcommands: run, compare, peak, validate, trace flatten.
Exit codes: 0 ok, 1 simulation failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import sys

from .config import (ConfigError, apply_overrides, bundled_config_names,
                     load_config, parse_config)
from .engine import SimulationError
from .experiments import (compare_policies, peak_search, run_experiment,
                          validate_calibration)
from .workload import TraceParseError, flatten_maf

EXIT_OK = 0
EXIT_SIM_FAILURE = 1
EXIT_CONFIG = 2


def _load_cfg(args):
    cfg_source = args.config
    cfg = load_config(cfg_source)
    data = cfg.raw
    overrides = list(getattr(args, "override", []) or [])
    if getattr(args, "seed", None) is not None:
        overrides.append(f"seed={args.seed}")
    if getattr(args, "policy", None) is not None:
        overrides.append(f"policy={args.policy}")
    if overrides:
        data = apply_overrides(data, overrides)
        cfg = parse_config(data)
    if getattr(args, "out", None) is not None:
        cfg.out_dir = args.out
    return cfg


def cmd_run(args) -> int:
    cfg = _load_cfg(args)
    result = run_experiment(cfg, out_dir=cfg.out_dir)
    print(f"[{cfg.policy.name}] {result.digest()}")
    return EXIT_OK


def cmd_compare(args) -> int:
    cfg = _load_cfg(args)
    policies = args.policies or None
    out = compare_policies(cfg, policies=policies, out_dir=cfg.out_dir)
    base = out["table"]["baseline"]
    for row in out["table"]["rows"]:
        mean = row["mean_latency_ms"]
        mean_s = f"{mean:.1f}" if mean is not None else "n/a"
        ratio = row["mean_latency_ratio"]
        ratio_s = f"{ratio:.3f}" if ratio is not None else "n/a"
        print(f"{row['policy']:>10}  tput={row['throughput_per_s']:.3f}/s "
              f"mean={mean_s}ms mean_vs_{base}={ratio_s} "
              f"mem={row['avg_gpu_memory_mb']:.1f}MB")
    return EXIT_OK


def cmd_peak(args) -> int:
    cfg = _load_cfg(args)
    result = peak_search(cfg, rate_min=args.rate_min, rate_ceiling=args.rate_ceiling,
                         out_dir=cfg.out_dir)
    if result.rate_per_s == 0.0:
        print(f"peak: none ({result.diagnostic})")
    elif result.hit_ceiling:
        print(f"peak: ceiling ({result.rate_per_s:.3f}/s)")
    else:
        print(f"peak: {result.rate_per_s:.3f}/s")
    return EXIT_OK


def cmd_validate(args) -> int:
    cfg = load_config(args.config if args.config else "validate_table5")
    report = validate_calibration(cfg)
    for row in report["rows"]:
        status = "PASS" if row["pass"] else "FAIL"
        print(f"{status}  {row['row']:>9}: measured {row['measured_ms']:.3f} ms "
              f"(expected {row['expected_ms']:.1f} ms, warmth {row['warmth']})")
    if report["pass"]:
        print("validation: PASS")
        return EXIT_OK
    print("validation: FAIL")
    return EXIT_SIM_FAILURE


def cmd_trace_flatten(args) -> int:
    count = flatten_maf(args.input, args.output)
    print(f"wrote {count} arrivals to {args.output}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gslsim",
        description="Discrete-event simulator of GPU serverless scheduling policies")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, config_required=True):
        p.add_argument("--config", required=config_required,
                       help="config file path or bundled scenario name "
                            f"({', '.join(bundled_config_names())})")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--policy", default=None, help="override the config policy")
        p.add_argument("--out", default=None, help="output directory for artifacts")
        p.add_argument("--override", action="append", default=[],
                       metavar="KEY=VALUE", help="dotted-path config override")

    p_run = sub.add_parser("run", help="execute one simulation")
    add_common(p_run)
    p_run.set_defaults(func=cmd_run)

    p_cmp = sub.add_parser("compare", help="run several policies on one arrival stream")
    add_common(p_cmp)
    p_cmp.add_argument("--policies", nargs="+", default=None,
                       help="policy names (default: config compare_policies)")
    p_cmp.set_defaults(func=cmd_compare)

    p_peak = sub.add_parser("peak", help="search the largest stable arrival rate")
    add_common(p_peak)
    p_peak.add_argument("--rate-min", type=float, default=0.5)
    p_peak.add_argument("--rate-ceiling", type=float, default=4096.0)
    p_peak.set_defaults(func=cmd_peak)

    p_val = sub.add_parser("validate", help="check the bundled latency calibration")
    p_val.add_argument("--config", default=None,
                       help="alternative staged-probe scenario (default: validate_table5)")
    p_val.set_defaults(func=cmd_validate)

    p_trace = sub.add_parser("trace", help="trace tooling")
    trace_sub = p_trace.add_subparsers(dest="trace_command", required=True)
    p_flat = trace_sub.add_parser("flatten",
                                  help="spread per-minute counts into a flat trace")
    p_flat.add_argument("input")
    p_flat.add_argument("output")
    p_flat.set_defaults(func=cmd_trace_flatten)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, TraceParseError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SimulationError, RuntimeError, OSError, ValueError) as exc:
        print(f"simulation failure: {exc}", file=sys.stderr)
        return EXIT_SIM_FAILURE


if __name__ == "__main__":
    sys.exit(main())
