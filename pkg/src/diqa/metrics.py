"""Pearson (LCC) and Spearman (SROCC) correlation, plus an optional logistic pre-fit."""
from __future__ import annotations

import numpy as np


class DegenerateError(ValueError):
    """Correlation undefined because one input has zero variance."""


def _pair(x, y) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise ValueError(f"length mismatch: {x.size} vs {y.size}")
    if x.size < 2:
        raise ValueError("correlation needs at least two pairs")
    return x, y


def lcc(x, y) -> float:
    """Pearson linear correlation coefficient."""
    x, y = _pair(x, y)
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = np.dot(dx, dx), np.dot(dy, dy)
    if sxx == 0 or syy == 0:
        raise DegenerateError("zero variance input; correlation undefined")
    r = np.dot(dx, dy) / np.sqrt(sxx * syy)
    return float(np.clip(r, -1.0, 1.0))


def average_ranks(values) -> np.ndarray:
    """1-based ranks; tied values share the mean of the ranks they span."""
    v = np.asarray(values, dtype=np.float64).ravel()
    order = np.argsort(v, kind="mergesort")
    sorted_v = v[order]
    ranks = np.empty(v.size, dtype=np.float64)
    start = 0
    while start < v.size:
        stop = start + 1
        while stop < v.size and sorted_v[stop] == sorted_v[start]:
            stop += 1
        ranks[order[start:stop]] = 0.5 * (start + stop - 1) + 1.0
        start = stop
    return ranks


def srocc(x, y) -> float:
    """Spearman rank-order correlation (Pearson on average ranks)."""
    x, y = _pair(x, y)
    return lcc(average_ranks(x), average_ranks(y))


def logistic(x, b1, b2, b3, b4):
    return (b1 - b2) / (1.0 + np.exp(-(x - b3) / np.abs(b4))) + b2


def logistic_fit(predictions, targets) -> np.ndarray:
    """Map predictions through a 4-parameter logistic fitted to the targets."""
    from scipy.optimize import curve_fit

    p, t = _pair(predictions, targets)
    spread = p.std() or 1.0
    start = [t.max(), t.min(), float(np.median(p)), spread]
    try:
        coef, _ = curve_fit(logistic, p, t, p0=start, maxfev=20000)
    except RuntimeError:
        return p
    return logistic(p, *coef)
