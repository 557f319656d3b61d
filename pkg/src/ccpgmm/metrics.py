"""Partition agreement and variance-explained summaries."""

from __future__ import annotations

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import NumericalError, ValidationError
from .pgmm import _as_matrix


def _pairs(x):
    return x * (x - 1) / 2.0


def contingency(labels_a, labels_b) -> np.ndarray:
    a = np.asarray(labels_a)
    b = np.asarray(labels_b)
    if a.shape != b.shape or a.ndim != 1:
        raise ValidationError("partitions must be 1-D and of equal length")
    _, ia = np.unique(a, return_inverse=True)
    _, ib = np.unique(b, return_inverse=True)
    table = np.zeros((ia.max() + 1, ib.max() + 1), dtype=np.int64)
    np.add.at(table, (ia, ib), 1)
    return table


def adjusted_rand_index(labels_a, labels_b) -> float:
    """Hubert-Arabie adjusted Rand index from the contingency table."""
    a = np.asarray(labels_a)
    if a.size < 2:
        raise ValidationError("ARI needs at least two items")
    n = contingency(labels_a, labels_b)
    index = _pairs(n).sum()
    rows = _pairs(n.sum(axis=1)).sum()
    cols = _pairs(n.sum(axis=0)).sum()
    expected = rows * cols / _pairs(a.size)
    max_index = 0.5 * (rows + cols)
    denom = max_index - expected
    if denom == 0:
        # both partitions trivial (all-one or all-singletons)
        return 1.0 if index == max_index else 0.0
    return float((index - expected) / denom)


def matched_accuracy(labels_true, labels_pred) -> float:
    """Pixel accuracy after the best one-to-one matching of predicted to true labels."""
    n = contingency(labels_true, labels_pred)
    r, c = linear_sum_assignment(n, maximize=True)
    return float(n[r, c].sum() / n.sum())


def confusion(labels_true, labels_pred, G: int | None = None) -> np.ndarray:
    """``C[i, j]`` counts pixels with true label ``i+1`` predicted as ``j+1``."""
    t = np.asarray(labels_true, dtype=np.int64)
    p = np.asarray(labels_pred, dtype=np.int64)
    if t.shape != p.shape:
        raise ValidationError("label vectors differ in length")
    G = int(max(t.max(), p.max())) if G is None else G
    C = np.zeros((G, G), dtype=np.int64)
    np.add.at(C, (t - 1, p - 1), 1)
    return C


def pca_variance_explained(table, q_max: int, correlation: bool = False) -> np.ndarray:
    """Cumulative percentage of variance carried by the first ``q_max`` principal components.

    Parameters
    ----------
    table : PixelTable or array_like of shape (N, p)
    q_max : int
        Number of leading components to report, ``q_max < p``.
    correlation : bool
        Use the correlation matrix instead of the covariance.
    """
    X = _as_matrix(table)
    N, p = X.shape
    if N < 2:
        raise ValidationError("need at least two pixels")
    if not 1 <= q_max < p:
        raise ValidationError(f"q_max must satisfy 1 <= q_max < p (p={p})")
    C = np.cov(X, rowvar=False)
    if correlation:
        sd = np.sqrt(np.diag(C))
        if np.any(sd == 0):
            raise NumericalError("constant variable: correlation undefined")
        C = C / np.outer(sd, sd)
    vals = np.clip(np.linalg.eigvalsh(C)[::-1], 0.0, None)
    total = vals.sum()
    if total <= 0:
        raise NumericalError("data have zero total variance")
    return 100.0 * np.cumsum(vals[:q_max]) / total
