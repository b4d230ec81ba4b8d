"""End-to-end peak-throughput searches against analytic bottleneck oracles."""

import pytest

from gslsim.config import parse_config
from gslsim.experiments import peak_search


def peak_cfg(table, mix_fn, duration_s, cluster, policy="SAGE"):
    return parse_config({
        "cluster": cluster,
        "policy": policy,
        "functions": table,
        "workload": {"kind": "poisson_open", "rate_per_s": 1,
                     "duration_s": duration_s, "mix": {mix_fn: 1.0}},
        "seed": 1, "duration_s": duration_s})


def test_peak_matches_pcie_bottleneck_formula():
    # zero setup, 50 MB payload on a 1000 MB/s link, unlimited compute
    # concurrency: the only ceiling is the channel, rate* = bw / bytes = 20/s
    table = {"pciebound": {"ro_mem_mb": 0, "writable_mem_mb": 1, "compute_ms": 10,
                           "ro_bytes_host_mb": 0, "ro_bytes_pcie_mb": 0,
                           "input_bytes_host_mb": 0, "input_bytes_pcie_mb": 50,
                           "cpu_ctx_ms": 0, "gpu_ctx_ms": 0, "return_ms": 0}}
    cfg = peak_cfg(table, "pciebound", 180,
                   {"gpus": 1, "pcie_bw_mbps": 1000, "host_bw_mbps": 1000})
    res = peak_search(cfg, rate_min=2, rate_ceiling=512)
    assert res.rate_per_s == pytest.approx(20.0, rel=0.05)


def test_peak_matches_compute_bottleneck_with_cap():
    # with a compute-concurrency cap of 1 the 10 ms kernel bounds the rate
    # near 100/s; without the cap the tiny payload would dominate instead
    table = {"cpubound": {"ro_mem_mb": 0, "writable_mem_mb": 1, "compute_ms": 10,
                          "ro_bytes_host_mb": 0, "ro_bytes_pcie_mb": 0,
                          "input_bytes_host_mb": 0, "input_bytes_pcie_mb": 0.1,
                          "cpu_ctx_ms": 0, "gpu_ctx_ms": 0, "return_ms": 0}}
    cfg = peak_cfg(table, "cpubound", 60,
                   {"gpus": 1, "compute_concurrency": 1})
    res = peak_search(cfg, rate_min=2, rate_ceiling=512)
    assert res.rate_per_s == pytest.approx(100.0, rel=0.05)


def test_paired_search_fixedgsl_peak_not_above_sage():
    base = {
        "cluster": {"gpus": 1},
        "functions": "builtin",
        "workload": {"kind": "poisson_open", "rate_per_s": 1, "duration_s": 30,
                     "mix": "uniform"},
        "seed": 1, "duration_s": 30}
    peaks = {}
    for policy in ("FixedGSL", "SAGE"):
        cfg = parse_config({**base, "policy": policy})
        peaks[policy] = peak_search(cfg, rate_min=1, rate_ceiling=1024).rate_per_s
    assert 0 < peaks["FixedGSL"] <= peaks["SAGE"]
    assert peaks["SAGE"] / peaks["FixedGSL"] > 2  # the gap is large, not marginal
