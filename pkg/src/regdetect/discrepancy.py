"""Discrepancy functions and the epsilon-good / epsilon-bad split."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

KINDS = ("absolute", "relative")
REL_DENOM_MIN = 1e-8


@dataclass(frozen=True)
class DiscrepancySpec:
    kind: str
    epsilon: float

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"discrepancy kind must be one of {KINDS}, got {self.kind!r}")
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be > 0, got {self.epsilon}")


def check_relative_denominator(yhat):
    yhat = np.atleast_1d(np.asarray(yhat, dtype=np.float64))
    bad = np.flatnonzero(np.abs(yhat) <= REL_DENOM_MIN)
    if bad.size:
        shown = ", ".join(str(i) for i in bad[:10])
        more = "" if bad.size <= 10 else f" (+{bad.size - 10} more)"
        raise ValueError(f"relative discrepancy undefined: |prediction| <= {REL_DENOM_MIN} at rows {shown}{more}")


def discrepancy(y, yhat, kind: str):
    """|y - yhat| (absolute) or |y - yhat| / |yhat| (relative); broadcasts."""
    y = np.asarray(y, dtype=np.float64)
    yhat = np.asarray(yhat, dtype=np.float64)
    if kind == "absolute":
        d = np.abs(y - yhat)
    elif kind == "relative":
        check_relative_denominator(yhat)
        d = np.abs(y - yhat) / np.abs(yhat)
    else:
        raise ValueError(f"unknown discrepancy kind {kind!r}")
    return d if d.ndim else float(d)


def band(yhat, spec: DiscrepancySpec):
    """The epsilon-good interval ``[lo, hi]`` around each prediction."""
    yhat = np.asarray(yhat, dtype=np.float64)
    if spec.kind == "absolute":
        half = np.full_like(yhat, spec.epsilon)
    else:
        check_relative_denominator(yhat)
        half = spec.epsilon * np.abs(yhat)
    return yhat - half, yhat + half


@dataclass(frozen=True)
class GoodBadPartition:
    good: np.ndarray
    bad: np.ndarray

    @property
    def labels(self):
        """Boolean ``is_bad`` per row."""
        out = np.zeros(len(self.good) + len(self.bad), dtype=bool)
        out[self.bad] = True
        return out


def bad_labels(y, yhat, spec: DiscrepancySpec) -> np.ndarray:
    return np.asarray(discrepancy(y, yhat, spec.kind)) > spec.epsilon


def partition_good_bad(ds, f, spec: DiscrepancySpec) -> GoodBadPartition:
    """Rows with d > epsilon are bad; d == epsilon counts as good."""
    is_bad = np.atleast_1d(bad_labels(ds.targets, f(ds.features), spec))
    return GoodBadPartition(np.flatnonzero(~is_bad), np.flatnonzero(is_bad))
