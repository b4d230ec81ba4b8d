"""Shared helpers: compact simulation builders for integration tests."""

import pytest

from gslsim.config import parse_config
from gslsim.experiments import run_experiment

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def make_cfg(policy="SAGE", arrivals=None, workload=None, duration_s=30.0,
             cluster=None, functions="builtin", seed=1, **ablations):
    data = {
        "cluster": cluster or {"gpus": 1},
        "functions": functions,
        "policy": policy,
        "seed": seed,
        "duration_s": duration_s,
    }
    if arrivals is not None:
        data["workload"] = {"kind": "sequence", "arrivals": arrivals}
    elif workload is not None:
        data["workload"] = workload
    else:
        data["workload"] = {"kind": "sequence", "arrivals": []}
    data.update(ablations)
    return parse_config(data)


def run_cfg(**kw):
    log_events = kw.pop("log_events", False)
    out_dir = kw.pop("out_dir", None)
    return run_experiment(make_cfg(**kw), out_dir=out_dir, log_events=log_events)


@pytest.fixture
def resnet_burst():
    """N simultaneous resnet50 arrivals at t=0."""
    def make(n, at_ms=0.0):
        return [[at_ms, "resnet50"] for _ in range(n)]
    return make
