"""Centralized training on the pooled dataset.

Used to produce the frozen common expert (train until a held-out accuracy
target is met or an epoch cap runs out) and as the reference trajectory in
conservation tests.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .data import LabeledDataset
from .errors import ConfigError, NumericError
from .seeding import rng_stream


def model_accuracy(spec: nn.NetSpec, params: nn.ParamVector, inputs: np.ndarray, labels: np.ndarray) -> float:
    """Fraction of argmax predictions matching the labels."""
    out = nn.forward(spec, params, inputs)
    return float(np.mean(out.argmax(axis=1) == labels))


@dataclass
class PretrainResult:
    params: nn.ParamVector
    accuracy: float
    epochs: int
    reached_target: bool


def pretrain(
    spec: nn.NetSpec,
    train_ds: LabeledDataset,
    holdout_ds: LabeledDataset,
    target_accuracy: float,
    max_epochs: int,
    lr: float,
    momentum: float,
    batch_size: int,
    seed: int,
) -> PretrainResult:
    """SGDM on the pooled training set until held-out accuracy >= target.

    The held-out accuracy is checked before the first epoch too, so a
    chance-level target returns the freshly initialized network.
    """
    if not (0.0 <= target_accuracy <= 1.0):
        raise ConfigError("target accuracy must lie in [0, 1]")
    if max_epochs < 0:
        raise ConfigError("max_epochs must be non-negative")
    rng = rng_stream(seed, "pretrain")
    params = nn.init_params(spec, rng)
    opt = nn.OptimizerState.fresh(spec, lr, momentum)
    n = len(train_ds)

    acc = model_accuracy(spec, params, holdout_ds.inputs, holdout_ds.labels)
    epochs = 0
    while acc < target_accuracy and epochs < max_epochs:
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            rows = order[start : start + batch_size]
            batch = nn.Batch(train_ds.inputs[rows], train_ds.labels[rows])
            loss, grad = nn.loss_and_grad(spec, params, batch, "ce_on_logits")
            if not np.isfinite(loss):
                raise NumericError("non-finite pretraining loss", context=f"epoch {epochs}")
            params, opt = nn.sgdm_step(params, grad, opt)
        epochs += 1
        acc = model_accuracy(spec, params, holdout_ds.inputs, holdout_ds.labels)
    return PretrainResult(params, acc, epochs, acc >= target_accuracy)
