"""Python bindings for the shardshift simulator."""

from ._core import (
    DeploymentConfig,
    ShardshiftError,
    ModelSpec,
    Request,
    SimResult,
    Trace,
    WorkloadSpec,
    adapt_block_size,
    compare,
    config_names,
    enumerate_tp_groups,
    generate_trace,
    kv_bytes_per_token,
    load_trace,
    max_context,
    preset,
    preset_names,
    run,
)

__all__ = [
    "DeploymentConfig",
    "ShardshiftError",
    "ModelSpec",
    "Request",
    "SimResult",
    "Trace",
    "WorkloadSpec",
    "adapt_block_size",
    "compare",
    "config_names",
    "enumerate_tp_groups",
    "generate_trace",
    "kv_bytes_per_token",
    "load_trace",
    "max_context",
    "preset",
    "preset_names",
    "run",
]
