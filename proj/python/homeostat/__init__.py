"""Homeostatic sparsity inserts (kWTA, RFB-kWTA, Smart Inhibition) for transformers."""

from homeostat._core import (
    CheckpointError,
    ConfigError,
    FormatError,
    InvalidInput,
    StatsCache,
    bleu,
    boost_factors,
    imi,
    inhibition_probs,
    kwta,
    median,
    median_adjust,
    parameter_count,
    resolve_config,
    run_cli,
    winners,
)

__all__ = [
    "CheckpointError",
    "ConfigError",
    "FormatError",
    "InvalidInput",
    "StatsCache",
    "bleu",
    "boost_factors",
    "imi",
    "inhibition_probs",
    "kwta",
    "median",
    "median_adjust",
    "parameter_count",
    "resolve_config",
    "run_cli",
    "winners",
]
