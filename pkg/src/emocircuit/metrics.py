"""Agreement and accuracy metrics."""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .errors import ValidationError


def _paired(x, y) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise ValidationError(f"series lengths differ: {x.size} vs {y.size}")
    if x.size < 2:
        raise ValidationError("need at least two paired values")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise ValidationError("series contain non-finite values")
    return x, y


def ccc(x, y) -> float:
    """Lin's concordance correlation coefficient with population moments.

    Two constant series give 1 when equal and 0 otherwise.
    """
    x, y = _paired(x, y)
    mx, my = x.mean(), y.mean()
    vx, vy = x.var(), y.var()
    if vx == 0 and vy == 0:
        return 1.0 if mx == my else 0.0
    cov = np.mean((x - mx) * (y - my))
    return float(2.0 * cov / (vx + vy + (mx - my) ** 2))


def pearson(x, y) -> float:
    x, y = _paired(x, y)
    sx, sy = x.std(), y.std()
    if sx == 0 or sy == 0:
        return 0.0
    return float(np.mean((x - x.mean()) * (y - y.mean())) / (sx * sy))


def accuracy(predicted: Sequence, reference: Sequence) -> float:
    if len(predicted) != len(reference):
        raise ValidationError(f"lengths differ: {len(predicted)} vs {len(reference)}")
    if not len(reference):
        raise ValidationError("accuracy of an empty sequence is undefined")
    return sum(p == r for p, r in zip(predicted, reference)) / len(reference)


def mean_over_runs(values: Sequence[float]) -> tuple[float, float]:
    """Mean and sample (n - 1) standard deviation; a single run has std 0."""
    v = [float(x) for x in values]
    if not v:
        raise ValidationError("no runs to aggregate")
    m = math.fsum(v) / len(v)
    if len(v) == 1:
        return m, 0.0
    return m, math.sqrt(math.fsum((x - m) ** 2 for x in v) / (len(v) - 1))


# --- reference trajectories


def cumulative_mean(values: Sequence[float]) -> np.ndarray:
    """Running mean ``mean(values[:t+1])`` for every t."""
    v = np.asarray(values, dtype=np.float64)
    return np.cumsum(v) / np.arange(1, v.size + 1)


def concept_balanced_mean(values: Sequence[float], concepts: Sequence[str]) -> np.ndarray:
    """Running mean over the concepts seen so far of each concept's running mean.

    This is what a memory that averages one prototype per expressed concept
    would hold; every concept counts once regardless of how often it occurred.
    """
    if len(values) != len(concepts):
        raise ValidationError(f"lengths differ: {len(values)} vs {len(concepts)}")
    sums: dict[str, float] = {}
    counts: dict[str, int] = {}
    out = np.empty(len(values))
    for t, (v, c) in enumerate(zip(values, concepts)):
        sums[c] = sums.get(c, 0.0) + float(v)
        counts[c] = counts.get(c, 0) + 1
        out[t] = math.fsum(sums[k] / counts[k] for k in sums) / len(sums)
    return out
