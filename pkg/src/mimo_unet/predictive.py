"""Laplace predictive likelihood and uncertainty decomposition.

Every subnetwork emits two raw maps (f1, f2) which parameterize a per-pixel
Laplace distribution: mu = f1 and b = exp(f2), with f2 clamped to [-10, 10]
before the exp so the scale stays inside [e^-10, e^10].

Training minimizes the scale-parameterized negative log-likelihood
``log b + |y - mu| / b`` averaged over pixels and subnetworks (the constant
log 2 of the full Laplace density is dropped from the training term).
Evaluation scores the equal-weight mixture of the subnetwork distributions
with its proper density, and splits predictive variance into an aleatoric
part (mean of the per-subnetwork variances 2 b^2) and an epistemic part
(spread of the subnetwork means).

All operations are pure and work on torch tensors; numpy arrays are
accepted and converted.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

__all__ = [
    "F2_CLAMP",
    "VARIANCE_FLOOR",
    "LaplaceField",
    "UncertaintyDecomposition",
    "to_laplace",
    "laplace_nll",
    "mimo_loss",
    "posterior_mean",
    "decompose_variance",
    "mixture_nll",
    "entropy_maps",
    "gaussian_entropy",
    "laplace_cdf",
    "mixture_cdf",
]

# Clamp on the raw log-scale head: keeps exp() finite and the NLL gradient
# alive early in training.
F2_CLAMP = 10.0

# Variance floor used by the entropy maps, in target units squared.
VARIANCE_FLOOR = 1e-12


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(x)


@dataclass
class LaplaceField:
    """Per-pixel Laplace parameters of one subnetwork: location mu, scale b > 0."""

    mu: torch.Tensor
    b: torch.Tensor

    def __post_init__(self):
        self.mu = _as_tensor(self.mu)
        self.b = _as_tensor(self.b)
        if self.mu.shape != self.b.shape:
            raise ValueError(
                f"mu and b must share a shape, got {tuple(self.mu.shape)} "
                f"vs {tuple(self.b.shape)}"
            )
        if not bool((self.b > 0).all()):
            raise ValueError("Laplace scale b must be positive everywhere")


@dataclass
class UncertaintyDecomposition:
    """Posterior mean plus aleatoric / epistemic / combined variance maps."""

    mean: torch.Tensor
    aleatoric_var: torch.Tensor
    epistemic_var: torch.Tensor
    combined_var: torch.Tensor


def to_laplace(out) -> LaplaceField:
    """Map a subnetwork's raw heads (f1, f2) to Laplace parameters."""
    f1, f2 = _as_tensor(out.f1), _as_tensor(out.f2)
    if not bool(torch.isfinite(f1).all()) or not bool(torch.isfinite(f2).all()):
        raise ValueError("raw heads contain non-finite values")
    return LaplaceField(mu=f1, b=torch.exp(torch.clamp(f2, -F2_CLAMP, F2_CLAMP)))


def laplace_nll(field: LaplaceField, y, mask=None):
    """Per-pixel training NLL ``log b + |y - mu| / b`` and its mean, in nats.

    The mean runs over unmasked pixels when a boolean mask is given.  Note
    the omitted additive constant log 2 of the full Laplace density.
    """
    y = _as_tensor(y)
    if y.shape != field.mu.shape:
        raise ValueError(
            f"target shape {tuple(y.shape)} does not match field shape "
            f"{tuple(field.mu.shape)}"
        )
    per_pixel = torch.log(field.b) + torch.abs(y - field.mu) / field.b
    if mask is None:
        return per_pixel, per_pixel.mean()
    mask = _as_tensor(mask).to(torch.bool)
    if not bool(mask.any()):
        raise ValueError("mask excludes every pixel")
    return per_pixel, per_pixel[mask].mean()


def mimo_loss(fields, targets, weights=None, masks=None):
    """Weighted training objective ``(1/m) * sum_i w_i * NLL_i``.

    ``weights`` default to 1; they are treated as constants (no gradient).
    The decoupled regularizer is applied by the optimizer, not here, so the
    returned scalar is the weighted NLL mean alone.
    """
    m = len(fields)
    if m < 1:
        raise ValueError("need at least one field")
    if len(targets) != m:
        raise ValueError("fields and targets must have the same length")
    if weights is None:
        weights = [1.0] * m
    if len(weights) != m:
        raise ValueError("fields and weights must have the same length")
    if masks is None:
        masks = [None] * m
    total = None
    for field, y, w, mask in zip(fields, targets, weights, masks):
        _, nll = laplace_nll(field, y, mask=mask)
        term = float(w) * nll
        total = term if total is None else total + term
    return total / m


def posterior_mean(fields) -> torch.Tensor:
    """Arithmetic mean of the subnetwork location maps."""
    if len(fields) < 1:
        raise ValueError("need at least one field")
    return torch.stack([f.mu for f in fields]).mean(dim=0)


def decompose_variance(fields, ddof: int = 1) -> UncertaintyDecomposition:
    """Split predictive variance into aleatoric and epistemic parts.

    aleatoric = (1/m) sum_i 2 b_i^2
    epistemic = (1/(m - ddof)) sum_i (mu_i - mean)^2

    ddof=1 (default) is the unbiased sample spread and needs m >= 2;
    ddof=0 makes the total match the exact variance of the equal-weight
    Laplace mixture.
    """
    m = len(fields)
    if ddof not in (0, 1):
        raise ValueError("ddof must be 0 or 1")
    if m - ddof < 1:
        raise ValueError(
            f"epistemic variance with ddof={ddof} needs at least {ddof + 1} "
            f"subnetworks, got {m}"
        )
    mus = torch.stack([f.mu for f in fields])
    mean = mus.mean(dim=0)
    aleatoric = torch.stack([2.0 * f.b**2 for f in fields]).mean(dim=0)
    epistemic = ((mus - mean) ** 2).sum(dim=0) / (m - ddof)
    return UncertaintyDecomposition(
        mean=mean,
        aleatoric_var=aleatoric,
        epistemic_var=epistemic,
        combined_var=aleatoric + epistemic,
    )


def mixture_nll(fields, y) -> torch.Tensor:
    """Mean NLL of the equal-weight Laplace mixture, in nats.

    Unlike the training term this scores the full density, i.e. for m=1 it
    equals ``log(2 b) + |y - mu| / b``.  Evaluated via log-sum-exp.
    """
    m = len(fields)
    if m < 1:
        raise ValueError("need at least one field")
    y = _as_tensor(y)
    log_probs = torch.stack(
        [-torch.log(2.0 * f.b) - torch.abs(y - f.mu) / f.b for f in fields]
    )
    per_pixel = math.log(m) - torch.logsumexp(log_probs, dim=0)
    return per_pixel.mean()


def gaussian_entropy(var: torch.Tensor) -> torch.Tensor:
    """Differential entropy ``0.5 * ln(2 pi e var)`` with a variance floor."""
    var = torch.clamp(_as_tensor(var), min=VARIANCE_FLOOR)
    return 0.5 * torch.log(2.0 * math.pi * math.e * var)


def entropy_maps(dec: UncertaintyDecomposition):
    """Per-pixel entropy of the epistemic and combined variance maps."""
    return gaussian_entropy(dec.epistemic_var), gaussian_entropy(dec.combined_var)


def laplace_cdf(field: LaplaceField, y) -> torch.Tensor:
    """Laplace distribution function evaluated per pixel."""
    y = _as_tensor(y)
    z = (y - field.mu) / field.b
    return torch.where(
        z < 0,
        0.5 * torch.exp(z),
        1.0 - 0.5 * torch.exp(-z),
    )


def mixture_cdf(fields, y) -> torch.Tensor:
    """Equal-weight average of the component distribution functions."""
    if len(fields) < 1:
        raise ValueError("need at least one field")
    return torch.stack([laplace_cdf(f, y) for f in fields]).mean(dim=0)
