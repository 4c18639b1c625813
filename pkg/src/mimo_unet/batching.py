"""MIMO batch construction.

During training every subnetwork sees its own random permutation of the
current batch, optionally correlated through input repetition: with
probability ``rho`` a slot of subnetwork i >= 2 copies the (input, target)
pair of subnetwork 1 instead of following its own permutation.  At
evaluation time the single unseen input is repeated for every subnetwork.

Rasters are numpy arrays of shape (channels, height, width); pairing of
inputs and targets is preserved under all permutations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["RepetitionPolicy", "MimoBatch", "make_train_batch", "make_eval_batch"]


@dataclass(frozen=True)
class RepetitionPolicy:
    """Input repetition probability, 0 <= rho <= 1."""

    rho: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError(f"rho must lie in [0, 1], got {self.rho}")


@dataclass
class MimoBatch:
    """Per-subnetwork aligned input/target lists.

    ``inputs[i][b]`` and ``targets[i][b]`` always belong to the same sample.
    ``repetition_mask[b, i]`` is True where slot b of subnetwork i was copied
    from subnetwork 0; column 0 is always False.
    """

    inputs: list[list[np.ndarray]]
    targets: list[list[np.ndarray]]
    repetition_mask: np.ndarray

    @property
    def num_subnetworks(self) -> int:
        return len(self.inputs)

    @property
    def batch_size(self) -> int:
        return len(self.inputs[0])


def make_train_batch(samples, m: int, policy: RepetitionPolicy,
                     rng: np.random.Generator) -> MimoBatch:
    """Build a training batch from ``samples`` (a list of (x, y) pairs).

    Each subnetwork gets an independent shuffle of the batch; fresh
    permutations are drawn on every call.  Repetition is decided per slot,
    independently for each subnetwork i >= 2.
    """
    if m < 1:
        raise ValueError("m must be >= 1")
    batch = list(samples)
    n = len(batch)
    if n == 0:
        raise ValueError("cannot build a batch from an empty sample list")

    perms = [rng.permutation(n) for _ in range(m)]
    mask = np.zeros((n, m), dtype=bool)
    inputs: list[list[np.ndarray]] = []
    targets: list[list[np.ndarray]] = []
    for i in range(m):
        xs = [batch[j][0] for j in perms[i]]
        ys = [batch[j][1] for j in perms[i]]
        if i > 0 and policy.rho > 0.0:
            copy = rng.random(n) < policy.rho
            for b in np.flatnonzero(copy):
                xs[b] = inputs[0][b]
                ys[b] = targets[0][b]
            mask[:, i] = copy
        inputs.append(xs)
        targets.append(ys)
    return MimoBatch(inputs=inputs, targets=targets, repetition_mask=mask)


def make_eval_batch(x: np.ndarray, m: int) -> list[np.ndarray]:
    """Repeat the input m times, one reference per subnetwork."""
    if m < 1:
        raise ValueError("m must be >= 1")
    return [x] * m
