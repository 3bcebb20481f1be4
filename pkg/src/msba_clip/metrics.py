"""Frame- and video-level detection metrics."""

from __future__ import annotations

from collections import defaultdict
from typing import Hashable, Sequence

import numpy as np
from scipy.stats import rankdata

from ._validation import check_binary_labels


class SingleClassError(ValueError):
    """AUC is undefined when only one class is present."""


def auc(scores, labels) -> float:
    """ROC-AUC via the Mann-Whitney rank sum; tied scores get average ranks (half credit)."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = check_binary_labels(labels).ravel()
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    if not np.all(np.isfinite(s)):
        raise ValueError("scores must be finite")
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise SingleClassError("AUC needs both positive and negative samples")
    ranks = rankdata(s, method="average")
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def accuracy(scores, labels, threshold: float = 0.5) -> float:
    """Fraction of correct decisions, predicting fake when ``score >= threshold``."""
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = check_binary_labels(labels).ravel()
    if s.size == 0:
        raise ValueError("accuracy of an empty set is undefined")
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    return float(np.mean((s >= threshold).astype(np.int64) == y))


def video_scores(scores: Sequence[float], labels: Sequence[int], keys: Sequence[Hashable]):
    """Average frame scores per video key; returns (scores, labels, keys) in first-seen order."""
    sums: dict = defaultdict(float)
    counts: dict = defaultdict(int)
    label_of: dict = {}
    order = []
    for s, y, k in zip(scores, labels, keys):
        if k not in label_of:
            order.append(k)
            label_of[k] = int(y)
        elif label_of[k] != int(y):
            raise ValueError(f"video {k!r} mixes real and fake frames")
        sums[k] += float(s)
        counts[k] += 1
    return (
        np.array([sums[k] / counts[k] for k in order]),
        np.array([label_of[k] for k in order], dtype=np.int64),
        order,
    )


def iou(pred: np.ndarray, target: np.ndarray) -> float:
    pred = np.asarray(pred, dtype=bool)
    target = np.asarray(target, dtype=bool)
    union = np.logical_or(pred, target).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pred, target).sum() / union)
