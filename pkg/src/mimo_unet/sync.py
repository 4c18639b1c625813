"""Submodel synchronization.

Subnetworks inside a MIMO model learn at uneven rates.  To counteract this,
the training loss of each submodel is rescaled by a softmax over the mean
losses of a rolling window: submodels that lag behind (higher loss) receive
a larger weight, and the weights always average to one so the overall
learning rate is preserved.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

__all__ = ["SyncState", "softmax_weights", "push_and_weight", "apply_weights"]


def softmax_weights(mean_losses, tau: float) -> np.ndarray:
    """Weights ``w_i = m * exp(l_i / tau) / sum_j exp(l_j / tau)``.

    Evaluated with max-subtraction so large losses cannot overflow.
    The result sums to ``m`` (mean weight 1).
    """
    l = np.asarray(mean_losses, dtype=np.float64)
    if l.ndim != 1 or l.size == 0:
        raise ValueError("mean_losses must be a non-empty 1-d vector")
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    z = l / tau
    z -= z.max()
    e = np.exp(z)
    return l.size * e / e.sum()


@dataclass
class SyncState:
    """Rolling per-submodel loss window plus the (tau, k) weighting knobs.

    Defaults tau=0.3, k=10.  With empty buffers all weights are 1.
    """

    num_submodels: int
    tau: float = 0.3
    window: int = 10
    buffers: list[deque] = field(init=False)

    def __post_init__(self):
        if self.num_submodels < 1:
            raise ValueError("num_submodels must be >= 1")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.window < 1:
            raise ValueError("window must be >= 1")
        self.buffers = [deque(maxlen=self.window) for _ in range(self.num_submodels)]

    def mean_losses(self) -> np.ndarray | None:
        """Per-submodel window means, or None while the buffers are empty."""
        if not self.buffers[0]:
            return None
        return np.array([sum(b) / len(b) for b in self.buffers])

    def current_weights(self) -> np.ndarray:
        means = self.mean_losses()
        if means is None:
            return np.ones(self.num_submodels)
        return softmax_weights(means, self.tau)


def push_and_weight(state: SyncState, step_losses) -> np.ndarray:
    """Append the current per-submodel losses and return fresh weights.

    Non-finite losses are rejected: the buffers stay untouched and the
    weights from the previous state are returned.
    """
    losses = [float(x) for x in step_losses]
    if len(losses) != state.num_submodels:
        raise ValueError(
            f"expected {state.num_submodels} losses, got {len(losses)}"
        )
    if not all(math.isfinite(x) for x in losses):
        return state.current_weights()
    for buf, x in zip(state.buffers, losses):
        buf.append(x)
    return state.current_weights()


def apply_weights(per_submodel_losses, weights):
    """Weighted mean loss ``(1/m) * sum_i w_i * L_i``.

    The weights are plain numbers (no gradient flows through them); the
    losses may be scalars or autograd tensors.
    """
    if len(per_submodel_losses) != len(weights):
        raise ValueError("losses and weights must have the same length")
    m = len(per_submodel_losses)
    total = None
    for loss, w in zip(per_submodel_losses, weights):
        term = float(w) * loss
        total = term if total is None else total + term
    return total / m
