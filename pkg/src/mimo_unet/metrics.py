"""Accuracy and calibration metrics.

Calibration follows the quantile-coverage recipe: PIT values (predictive
CDF evaluated at the observed targets) are compared against nominal levels,
and ECE is the mean absolute gap over 19 evenly spaced levels.  The
"precision-recall" view of uncertainty is a sparsification curve: keep the
fraction of pixels with the lowest predicted uncertainty and track their
MAE as the fraction grows.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "DEFAULT_LEVELS",
    "CalibrationReport",
    "SparsificationCurve",
    "mae",
    "rmse",
    "calibration",
    "sparsification",
    "entropy_histogram",
]

DEFAULT_LEVELS = np.round(np.arange(1, 20) * 0.05, 2)


def _flat_errors(pred, y, mask):
    pred = np.asarray(pred, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if pred.shape != y.shape:
        raise ValueError(
            f"prediction shape {pred.shape} does not match target {y.shape}"
        )
    delta = pred - y
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), delta.shape)
        if not mask.any():
            raise ValueError("mask excludes every pixel")
        delta = delta[mask]
    return delta.ravel()


def mae(pred, y, mask=None) -> float:
    """Mean absolute error over unmasked pixels."""
    return float(np.abs(_flat_errors(pred, y, mask)).mean())


def rmse(pred, y, mask=None) -> float:
    """Root mean squared error over unmasked pixels."""
    return float(np.sqrt((_flat_errors(pred, y, mask) ** 2).mean()))


@dataclass
class CalibrationReport:
    levels: np.ndarray       # nominal quantile levels, strictly increasing
    observed: np.ndarray     # empirical coverage per level
    ece: float


def calibration(pit_values, levels=None) -> CalibrationReport:
    """Quantile calibration from PIT values.

    observed[j] is the fraction of PIT values <= levels[j]; ECE is the mean
    absolute deviation between the two.
    """
    pit = np.asarray(pit_values, dtype=np.float64).ravel()
    if pit.size == 0:
        raise ValueError("no PIT values given")
    levels = DEFAULT_LEVELS if levels is None else np.asarray(levels, dtype=np.float64)
    if levels.size == 0 or np.any(np.diff(levels) <= 0):
        raise ValueError("levels must be strictly increasing and non-empty")
    if levels.min() <= 0 or levels.max() >= 1:
        raise ValueError("levels must lie strictly inside (0, 1)")
    observed = np.array([(pit <= p).mean() for p in levels])
    ece = float(np.abs(levels - observed).mean())
    return CalibrationReport(levels=levels, observed=observed, ece=ece)


@dataclass
class SparsificationCurve:
    retained_fractions: np.ndarray
    mae_at_fraction: np.ndarray


def sparsification(abs_error, uncertainty, fractions=None) -> SparsificationCurve:
    """MAE of the lowest-uncertainty pixel prefix for each retained fraction.

    Ties in uncertainty break by pixel index (stable sort).  The retained
    count is ceil(fraction * d), so fraction 1.0 reproduces the global MAE.
    """
    err = np.asarray(abs_error, dtype=np.float64).ravel()
    unc = np.asarray(uncertainty, dtype=np.float64).ravel()
    if err.shape != unc.shape:
        raise ValueError("error and uncertainty must have the same size")
    if fractions is None:
        fractions = np.round(np.arange(1, 21) * 0.05, 2)
    fractions = np.asarray(fractions, dtype=np.float64)
    if np.any(fractions <= 0) or np.any(fractions > 1):
        raise ValueError("fractions must lie in (0, 1]")
    if np.any(np.diff(fractions) <= 0):
        raise ValueError("fractions must be strictly increasing")
    order = np.argsort(unc, kind="stable")
    sorted_err = np.abs(err[order])
    prefix = np.cumsum(sorted_err)
    d = err.size
    maes = []
    for r in fractions:
        k = min(d, max(1, int(np.ceil(r * d - 1e-9))))
        maes.append(prefix[k - 1] / k)
    return SparsificationCurve(
        retained_fractions=fractions,
        mae_at_fraction=np.asarray(maes),
    )


def entropy_histogram(maps, bins=50):
    """Histogram entropy maps on shared bin edges.

    ``maps`` may be one array or a sequence of arrays; returns
    (counts, edges) for a single map or (list_of_counts, edges) for several.
    """
    single = isinstance(maps, np.ndarray) or np.isscalar(maps[0])
    arrays = [np.asarray(maps)] if single else [np.asarray(m) for m in maps]
    for a in arrays:
        if not np.isfinite(a).all():
            raise ValueError("entropy maps must be finite")
    lo = min(a.min() for a in arrays)
    hi = max(a.max() for a in arrays)
    if lo == hi:
        lo, hi = lo - 0.5, hi + 0.5
    edges = np.histogram_bin_edges(arrays[0], bins=bins, range=(lo, hi))
    counts = [np.histogram(a, bins=edges)[0] for a in arrays]
    return (counts[0], edges) if single else (counts, edges)
