"""Evaluation measures: rank/linear correlations and macro P/R/F1.

Macro averaging runs over ALL declared classes with zero substitution
for classes that have no predictions or no gold occurrences, so a
degenerate classifier that always predicts one of C balanced classes
scores exactly 1/C macro recall.
"""

from __future__ import annotations

import numpy as np


class ZeroVariance(ValueError):
    """A correlation argument is constant; the measure is undefined."""


class UnknownLabel(ValueError):
    """A prediction or gold label is outside the declared class set."""


def _corr_args(x, y) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 1 or y.ndim != 1 or x.shape != y.shape:
        raise ValueError(f"expected equal-length vectors, got {x.shape} and {y.shape}")
    if x.size < 2:
        raise ValueError("need at least 2 observations")
    return x, y


def pearson(x, y) -> float:
    """Product-moment correlation; raises :class:`ZeroVariance` on a
    constant argument rather than reporting a spurious 0."""
    x, y = _corr_args(x, y)
    dx = x - x.mean()
    dy = y - y.mean()
    sx = np.sqrt(np.sum(dx * dx))
    sy = np.sqrt(np.sum(dy * dy))
    if sx == 0.0 or sy == 0.0:
        raise ZeroVariance("correlation undefined for a constant vector")
    r = float(np.sum(dx * dy) / (sx * sy))
    return min(1.0, max(-1.0, r))


def average_ranks(x) -> np.ndarray:
    """Ranks starting at 1, ties sharing the mean of their rank block."""
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="stable")
    ranks = np.empty(x.size, dtype=np.float64)
    i = 0
    while i < x.size:
        j = i
        while j + 1 < x.size and x[order[j + 1]] == x[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def spearman(x, y) -> float:
    """Rank correlation: Pearson over average ranks."""
    x, y = _corr_args(x, y)
    return pearson(average_ranks(x), average_ranks(y))


def confusion_counts(pred, gold, classes) -> dict:
    """Per-class true positive / false positive / false negative counts."""
    if len(pred) != len(gold):
        raise ValueError("prediction and gold lists differ in length")
    classes = list(classes)
    class_set = set(classes)
    counts = {c: {"tp": 0, "fp": 0, "fn": 0} for c in classes}
    for p, g in zip(pred, gold):
        if p not in class_set:
            raise UnknownLabel(f"predicted label {p!r} not in declared classes")
        if g not in class_set:
            raise UnknownLabel(f"gold label {g!r} not in declared classes")
        if p == g:
            counts[p]["tp"] += 1
        else:
            counts[p]["fp"] += 1
            counts[g]["fn"] += 1
    return counts


def macro_prf(pred, gold, classes) -> tuple[float, float, float]:
    """Macro (F1, precision, recall) over all declared classes."""
    counts = confusion_counts(pred, gold, classes)
    f_sum = p_sum = r_sum = 0.0
    for c in counts:
        tp, fp, fn = counts[c]["tp"], counts[c]["fp"], counts[c]["fn"]
        p = tp / (tp + fp) if tp + fp > 0 else 0.0
        r = tp / (tp + fn) if tp + fn > 0 else 0.0
        f = 2 * p * r / (p + r) if p + r > 0 else 0.0
        p_sum += p
        r_sum += r
        f_sum += f
    n = len(counts)
    return f_sum / n, p_sum / n, r_sum / n
