"""Labelling new pixels with a fitted ensemble.

Each subset model scores the new pixels on its own variables; component
numbers are aligned to the training consensus through an optimal
assignment on constrained training pixels, and the final label is the
most frequent aligned vote.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment

from .consensus import EnsembleResult, export_rasters
from .errors import ValidationError
from .hsi import PixelTable
from .pgmm import _as_matrix, log_weighted_densities


class AlignmentWarning(UserWarning):
    pass


@dataclass(frozen=True)
class Alignment:
    """``perm[k]`` is the reference label given to subset component ``k + 1``."""

    perm: np.ndarray
    agreement: int | float
    fallback_all_pixels: bool = False
    missing_reference: tuple[int, ...] = ()

    @property
    def flagged(self) -> bool:
        return self.fallback_all_pixels or bool(self.missing_reference)


def agreement_matrix(subset_labels, reference_labels, G: int) -> np.ndarray:
    """``A[k, r]`` counts pixels with subset label ``k+1`` and reference label ``r+1``."""
    a = np.asarray(subset_labels) - 1
    b = np.asarray(reference_labels) - 1
    A = np.zeros((G, G), dtype=np.int64)
    np.add.at(A, (a, b), 1)
    return A


def best_assignment(A) -> np.ndarray:
    """Lexicographically smallest permutation maximising ``sum_k A[k, perm[k]]``.

    The optimum comes from the Hungarian solver; the prefix is then fixed
    greedily, keeping a candidate only if the remaining rows can still
    reach the optimum.
    """
    A = np.asarray(A)
    G = A.shape[0]
    exact = np.issubdtype(A.dtype, np.integer)
    A = A.astype(np.int64 if exact else float)

    def best(rows, cols):
        if not rows:
            return 0
        sub = A[np.ix_(rows, cols)]
        r, c = linear_sum_assignment(sub, maximize=True)
        return sub[r, c].sum()

    target = best(list(range(G)), list(range(G)))
    tol = 0 if exact else 1e-9 * max(1.0, float(np.abs(A).max()))
    perm = np.empty(G, dtype=np.int64)
    used: list[int] = []
    gained = 0
    for k in range(G):
        rest_rows = list(range(k + 1, G))
        for r in range(G):
            if r in used:
                continue
            cols = [c for c in range(G) if c not in used and c != r]
            if gained + A[k, r] + best(rest_rows, cols) >= target - tol:
                perm[k] = r
                used.append(r)
                gained += A[k, r]
                break
    return perm


def align_labels(posteriors, reference_labels, cons=None) -> Alignment:
    """Permutation of a subset's components onto the reference labels.

    Agreement is counted over constrained training pixels; without
    constraints every training pixel is used and the result is flagged.
    """
    z = np.asarray(posteriors)
    ref = np.asarray(reference_labels)
    N, G = z.shape
    if ref.shape != (N,):
        raise ValidationError(f"reference labels must have length {N}")
    fallback = cons is None or cons.n_blocks == 0
    mask = np.ones(N, dtype=bool) if fallback else cons.constrained_mask(N)
    A = agreement_matrix(z[mask].argmax(axis=1) + 1, ref[mask], G)
    perm = best_assignment(A)
    missing = tuple(int(r) + 1 for r in np.flatnonzero(A.sum(axis=0) == 0))
    if fallback:
        warnings.warn("no constrained pixels: aligning on all training pixels", AlignmentWarning, stacklevel=2)
    if missing:
        warnings.warn(
            f"reference label(s) {list(missing)} absent from alignment pixels; mapped by leftover assignment",
            AlignmentWarning,
            stacklevel=2,
        )
    return Alignment(perm + 1, int(A[np.arange(G), perm].sum()), fallback, missing)


@dataclass(frozen=True)
class ClassificationResult:
    labels: np.ndarray
    uncertainty: np.ndarray
    votes: np.ndarray = field(repr=False)  # (M, N) aligned labels
    alignments: tuple[Alignment, ...] = ()

    @property
    def M(self) -> int:
        return self.votes.shape[0]


def mode_vote(votes: np.ndarray, G: int) -> tuple[np.ndarray, np.ndarray]:
    """Most frequent label per column (ties to the smaller label) and ``1 - count/M``."""
    votes = np.asarray(votes)
    M, N = votes.shape
    counts = np.zeros((N, G + 1), dtype=np.int64)
    for m in range(M):
        counts[np.arange(N), votes[m]] += 1
    labels = counts[:, 1:].argmax(axis=1) + 1
    top = counts[np.arange(N), labels]
    return labels, (M - top) / M


def classify_pixels(new_table, ensemble: EnsembleResult) -> ClassificationResult:
    if ensemble.M == 0:
        raise ValidationError("ensemble holds no subset fits")
    if ensemble.labels is None:
        raise ValidationError("ensemble carries no training consensus labels")
    X = _as_matrix(new_table)
    if X.ndim != 2 or X.shape[1] != ensemble.plan.p:
        raise ValidationError(
            f"new pixels have {X.shape[-1]} variables, the ensemble was fitted on {ensemble.plan.p}"
        )
    X = ensemble.transform(X)
    votes = np.empty((ensemble.M, X.shape[0]), dtype=np.int64)
    aligns = []
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", AlignmentWarning)
        for m, (model, subset) in enumerate(zip(ensemble.models, ensemble.plan.subsets)):
            al = align_labels(ensemble.posteriors[m], ensemble.labels, ensemble.constraints)
            raw = log_weighted_densities(np.ascontiguousarray(X[:, subset]), model).argmax(axis=1)
            votes[m] = al.perm[raw]
            aligns.append(al)
    for msg in {str(w.message) for w in caught}:
        warnings.warn(msg, AlignmentWarning, stacklevel=2)
    labels, unc = mode_vote(votes, ensemble.G)
    return ClassificationResult(labels, unc, votes, tuple(aligns))


def export_classification(result: ClassificationResult, table: PixelTable, directory) -> list[Path]:
    return export_rasters(result.labels, result.uncertainty, table, directory)
