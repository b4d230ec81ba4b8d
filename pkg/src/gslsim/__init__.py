"""Discrete-event simulator of a GPU-enabled serverless node/cluster.

Models the GPU-function lifecycle (container, CPU/GPU context, CPU/GPU data
loading, compute, return), data-loading contention as equal-share fluid
processor sharing, read-only/context memory sharing with a multi-stage
resource exit, and five scheduling policies (FixedGSL, FixedGSL-F, DGSF,
SAGE, SAGE-NR) over synthetic and trace-driven workloads.
"""

__version__ = "0.1.0"
