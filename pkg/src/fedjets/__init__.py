"""Desk-scale simulator of federated mixture-of-experts training with a
learned gating function, anchor-client specialization, and zero-shot
personalization on unseen clients, plus the standard baselines."""

from . import baselines, benchmarks, central, checkpoint, config, data, evaluation, experiment, gating, metrics, nn, runtime
from .errors import ArtifactError, ConfigError, FedjetsError, NumericError, ProtocolError

__all__ = [
    "ArtifactError",
    "ConfigError",
    "FedjetsError",
    "NumericError",
    "ProtocolError",
    "baselines",
    "benchmarks",
    "central",
    "checkpoint",
    "config",
    "data",
    "evaluation",
    "experiment",
    "gating",
    "metrics",
    "nn",
    "runtime",
]

__version__ = "0.1.0"
