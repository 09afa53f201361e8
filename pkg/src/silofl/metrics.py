"""Evaluation metrics: best-mean-test scores, macro-F1, rank correlation."""

from __future__ import annotations

import numpy as np


def accuracy(preds: np.ndarray, labels: np.ndarray) -> float:
    if len(preds) != len(labels):
        raise ValueError("length mismatch")
    return float(np.mean(np.asarray(preds) == np.asarray(labels)))


def compute_bmta(acc_matrix: np.ndarray) -> float:
    """Best over rounds of the per-round mean across clients."""
    acc_matrix = np.asarray(acc_matrix, dtype=np.float64)
    if acc_matrix.size == 0:
        raise ValueError("empty accuracy matrix")
    if acc_matrix.ndim != 2:
        raise ValueError("expected a rounds x clients matrix")
    return float(acc_matrix.mean(axis=1).max())


def compute_macro_f1(preds: np.ndarray, labels: np.ndarray, n_classes: int) -> float:
    """Unweighted mean of per-class F1; a class absent from both sides scores 0."""
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    if preds.shape != labels.shape:
        raise ValueError("length mismatch")
    f1s = []
    for c in range(n_classes):
        tp = float(np.sum((preds == c) & (labels == c)))
        fp = float(np.sum((preds == c) & (labels != c)))
        fn = float(np.sum((preds != c) & (labels == c)))
        precision = tp / (tp + fp) if tp + fp > 0 else 0.0
        recall = tp / (tp + fn) if tp + fn > 0 else 0.0
        f1s.append(2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0)
    return float(np.mean(f1s))


def _average_ranks(v: np.ndarray) -> np.ndarray:
    order = np.argsort(v, kind="stable")
    ranks = np.empty(v.size, dtype=np.float64)
    sv = v[order]
    i = 0
    while i < v.size:
        j = i
        while j + 1 < v.size and sv[j + 1] == sv[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def spearman(x: np.ndarray, y: np.ndarray) -> float:
    """Pearson correlation of average-tie ranks; undefined for constant input."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or x.size < 2:
        raise ValueError("need two equal-length vectors of at least 2 points")
    rx = _average_ranks(x)
    ry = _average_ranks(y)
    sx = rx - rx.mean()
    sy = ry - ry.mean()
    denom = np.sqrt(np.sum(sx * sx) * np.sum(sy * sy))
    if denom == 0.0:
        raise ValueError("rank correlation undefined for constant input")
    return float(np.sum(sx * sy) / denom)
