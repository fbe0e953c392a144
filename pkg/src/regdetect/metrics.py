"""Ranking metrics for detectors whose larger scores mean "bad"."""

from __future__ import annotations

import numpy as np
from scipy.stats import rankdata


class SingleClassError(ValueError):
    """Labels contain only positives or only negatives."""


def _check(scores, labels):
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).astype(bool).reshape(-1)
    if s.shape != y.shape:
        raise ValueError(f"{s.size} scores for {y.size} labels")
    if not np.all(np.isfinite(s)):
        raise ValueError("scores must be finite")
    n_pos = int(y.sum())
    if n_pos == 0 or n_pos == y.size:
        raise SingleClassError(f"single-class labels ({n_pos} positive of {y.size})")
    return s, y, n_pos, y.size - n_pos


def auroc(scores, labels) -> float:
    """Mann-Whitney AUROC; tied pairs count 1/2."""
    s, y, P, N = _check(scores, labels)
    # midranks doubled are integers, so the U numerator is exact
    r2 = (2.0 * rankdata(s, method="average"))
    u2 = r2[y].sum() - P * (P + 1)
    return float(u2 / (2.0 * P * N))


def roc_points(scores, labels):
    """Step ROC over thresholds at the distinct observed scores, descending.

    Row k classifies ``score >= thresholds[k]`` as bad.
    """
    s, y, P, N = _check(scores, labels)
    thr = np.unique(s)[::-1]
    order = np.argsort(-s, kind="stable")
    ss, yy = s[order], y[order]
    tp = np.cumsum(yy)
    fp = np.cumsum(~yy)
    last = np.searchsorted(-ss, -thr, side="right") - 1
    return thr, tp[last] / P, fp[last] / N


def fpr_at_tpr(scores, labels, level: float = 0.9) -> float:
    """FPR at the largest threshold whose TPR reaches ``level``."""
    if not 0.0 <= level <= 1.0:
        raise ValueError("level must lie in [0, 1]")
    thr, tpr, fpr = roc_points(scores, labels)
    k = int(np.argmax(tpr >= level))
    return float(fpr[k])
