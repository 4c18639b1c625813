"""MC Dropout and Deep Ensembles comparators.

Both produce lists of Laplace fields and reuse the exact same posterior
aggregation as the MIMO path (posterior_mean / decompose_variance), so the
three methods differ only in how the fields are sampled:

* MC Dropout: one single-subnetwork model with spatial dropout kept active
  at inference, T stochastic passes.
* Deep Ensembles: M independently initialized single-subnetwork models,
  one deterministic pass each.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import torch
import torch.nn as nn

from .batching import make_eval_batch
from .predictive import LaplaceField, to_laplace

__all__ = ["DropoutConfig", "EnsembleConfig", "dropout_predict", "ensemble_predict"]


@dataclass(frozen=True)
class DropoutConfig:
    p: float = 0.1
    samples: int = 5

    def __post_init__(self):
        if not 0.0 <= self.p < 1.0:
            raise ValueError("dropout probability must lie in [0, 1)")
        if self.samples < 1:
            raise ValueError("samples must be >= 1")


@dataclass(frozen=True)
class EnsembleConfig:
    size: int = 5
    seeds: tuple[int, ...] = field(default=())

    def __post_init__(self):
        seeds = self.seeds or tuple(range(self.size))
        if len(seeds) != self.size:
            raise ValueError("need exactly one seed per member")
        if len(set(seeds)) != len(seeds):
            raise ValueError("member seeds must be pairwise distinct")
        object.__setattr__(self, "seeds", tuple(seeds))


class _dropout_active:
    """Keep only the dropout layers in train mode."""

    def __init__(self, model):
        self.model = model

    def __enter__(self):
        self.was_training = self.model.training
        self.model.eval()
        for module in self.model.modules():
            if isinstance(module, nn.Dropout2d):
                module.train()
        return self.model

    def __exit__(self, *exc):
        self.model.train(self.was_training)
        return False


def dropout_predict(model, x, samples: int, seed: int | None = None) -> list[LaplaceField]:
    """T stochastic forward passes with dropout active, independent masks."""
    if samples < 1:
        raise ValueError("samples must be >= 1")
    if model.cfg.dropout_p == 0.0 and samples > 1:
        warnings.warn(
            "dropout_p is 0: all passes are identical and epistemic "
            "variance degenerates to zero",
            stacklevel=2,
        )
    if seed is not None:
        torch.manual_seed(seed)
    x = torch.as_tensor(x, dtype=torch.float32)
    fields = []
    with _dropout_active(model), torch.no_grad():
        for _ in range(samples):
            outs = model(make_eval_batch(x, model.num_subnetworks))
            fields.extend(to_laplace(o) for o in outs)
    return fields


def ensemble_predict(models, x) -> list[LaplaceField]:
    """One deterministic pass per member; members must share a config."""
    if not models:
        raise ValueError("ensemble must contain at least one model")
    ref = models[0].cfg
    for model in models:
        if model.cfg.num_subnetworks != 1:
            raise ValueError("ensemble members must be single-subnetwork models")
        same = (model.cfg.in_channels == ref.in_channels
                and model.cfg.base_channels == ref.base_channels
                and model.cfg.depth == ref.depth
                and model.cfg.activation == ref.activation)
        if not same:
            raise ValueError("ensemble members must share an architecture config")
    x = torch.as_tensor(x, dtype=torch.float32)
    fields = []
    with torch.no_grad():
        for model in models:
            was_training = model.training
            model.eval()
            try:
                outs = model(make_eval_batch(x, 1))
            finally:
                model.train(was_training)
            fields.append(to_laplace(outs[0]))
    return fields
