"""Pixel-level detection metrics and partition agreement."""

from dataclasses import asdict, dataclass

import numpy as np
from scipy.stats import rankdata

from .tensor import ShapeError

__all__ = [
    "SingleClassError",
    "EvalResult",
    "pixel_auc",
    "f1_at_eer",
    "evaluate",
    "adjusted_rand_index",
]


class SingleClassError(ValueError):
    """Metric needs both positive and negative labels."""


@dataclass
class EvalResult:
    auc: float
    f1: float
    eer_threshold: float
    tp: int
    fp: int
    tn: int
    fn: int

    def to_dict(self):
        return asdict(self)


def _binary(scores, labels):
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if s.shape != y.shape:
        raise ShapeError(f"{s.size} scores but {y.size} labels")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0 or 1")
    y = y.astype(bool)
    n_pos = int(y.sum())
    if n_pos == 0 or n_pos == y.size:
        raise SingleClassError("labels contain a single class")
    return s, y


def pixel_auc(scores, labels):
    """Mann-Whitney AUC with midranks for tied scores."""
    s, y = _binary(scores, labels)
    ranks = rankdata(s, method="average")
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def _sweep(s, y):
    """Counts for every midpoint threshold, predicting positive when ``s > t``."""
    order = np.argsort(-s, kind="stable")
    s_sorted = s[order]
    y_sorted = y[order]
    # last index of each run of equal scores (descending)
    ends = np.flatnonzero(np.diff(s_sorted) != 0)
    tp = np.cumsum(y_sorted)[ends]
    fp = np.cumsum(~y_sorted)[ends]
    thresholds = (s_sorted[ends] + s_sorted[ends + 1]) / 2.0
    return thresholds, tp, fp


def f1_at_eer(scores, labels, return_counts=False):
    """F1 at the threshold where FPR and FNR are closest.

    Candidates are midpoints between consecutive distinct scores; pixels
    scoring above the threshold are predicted manipulated.  Ties in
    ``|FPR - FNR|`` go to the higher F1, then to the lower threshold.
    """
    s, y = _binary(scores, labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    thresholds, tp, fp = _sweep(s, y)
    if thresholds.size == 0:
        # a single distinct score: nothing is above it
        thresholds = np.array([s[0]])
        tp = np.array([0])
        fp = np.array([0])
    fn = n_pos - tp
    # |FPR - FNR| * P * N, exact in integers
    gap = np.abs(fp.astype(np.int64) * n_pos - fn.astype(np.int64) * n_neg)
    f1 = 2.0 * tp / (2.0 * tp + fp + fn)
    best = np.flatnonzero(gap == gap.min())
    best = best[f1[best] == f1[best].max()]
    i = best[np.argmin(thresholds[best])]
    if not return_counts:
        return float(f1[i]), float(thresholds[i])
    return float(f1[i]), float(thresholds[i]), (int(tp[i]), int(fp[i]),
                                                 int(n_neg - fp[i]), int(fn[i]))


def evaluate(scores, labels):
    f1, thr, (tp, fp, tn, fn) = f1_at_eer(scores, labels, return_counts=True)
    return EvalResult(pixel_auc(scores, labels), f1, thr, tp, fp, tn, fn)


def _comb2(x):
    x = np.asarray(x, dtype=np.float64)
    return x * (x - 1.0) / 2.0


def adjusted_rand_index(labels_a, labels_b):
    """Chance-corrected pair-counting agreement between two partitions."""
    a = np.asarray(labels_a).reshape(-1)
    b = np.asarray(labels_b).reshape(-1)
    if a.shape != b.shape:
        raise ShapeError(f"partitions have {a.size} and {b.size} elements")
    n = a.size
    _, ia = np.unique(a, return_inverse=True)
    _, ib = np.unique(b, return_inverse=True)
    table = np.zeros((ia.max() + 1, ib.max() + 1), dtype=np.int64)
    np.add.at(table, (ia, ib), 1)
    index = _comb2(table).sum()
    sum_a = _comb2(table.sum(axis=1)).sum()
    sum_b = _comb2(table.sum(axis=0)).sum()
    expected = sum_a * sum_b / _comb2(n) if n > 1 else 0.0
    max_index = (sum_a + sum_b) / 2.0
    if max_index == expected:
        return 1.0
    return float((index - expected) / (max_index - expected))
