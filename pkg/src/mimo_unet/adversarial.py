"""Fast Gradient Sign Method perturbations.

The attack ascends the plain likelihood criterion (unweighted mean of the
per-subnetwork NLLs, no synchronization weights, no weight decay) with the
input tiled across subnetworks and the clean ground truth as the target, so
the perturbation bound ||x_adv - x||_inf <= epsilon holds by construction.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .batching import make_eval_batch
from .predictive import mimo_loss, to_laplace

__all__ = ["AttackConfig", "fgsm"]


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float
    clip_range: tuple[float, float] = (0.0, 1.0)

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("epsilon must be nonnegative")
        lo, hi = self.clip_range
        if not lo < hi:
            raise ValueError("clip_range must satisfy lo < hi")


def fgsm(model, x, y, cfg: AttackConfig) -> torch.Tensor:
    """x_adv = clip(x + eps * sign(grad_x NLL)), zero gradient giving sign 0."""
    was_training = model.training
    model.eval()
    try:
        x = torch.as_tensor(x, dtype=torch.float32).clone().requires_grad_(True)
        y = torch.as_tensor(y, dtype=torch.float32)
        m = model.num_subnetworks
        outs = model(make_eval_batch(x, m))
        fields = [to_laplace(o) for o in outs]
        loss = mimo_loss(fields, [y] * m)
        grad, = torch.autograd.grad(loss, x)
        if not bool(torch.isfinite(grad).all()):
            raise ValueError("non-finite input gradient in FGSM")
        lo, hi = cfg.clip_range
        with torch.no_grad():
            x_adv = torch.clamp(x + cfg.epsilon * torch.sign(grad), lo, hi)
        return x_adv.detach()
    finally:
        model.train(was_training)
