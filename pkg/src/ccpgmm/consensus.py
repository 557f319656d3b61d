"""Consensus over constrained PGMM fits on random variable subsets.

Every subset fit yields a posterior matrix; pixel similarities are the
inner products of posterior rows averaged over subsets, and a
complete-linkage dendrogram on ``1 - S`` is cut into ``G`` clusters.
"""

from __future__ import annotations

import json
import logging
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from multiprocessing import get_context
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import aecm
from .errors import UnreadableFileError, ValidationError
from .hsi import ConstraintSet, PixelTable, save_raster
from .pgmm import MixtureModel, _as_matrix

log = logging.getLogger(__name__)


class CoverageWarning(UserWarning):
    pass


class ConvergenceWarning(UserWarning):
    pass


class ClusterShortfallWarning(UserWarning):
    pass


# ---------------------------------------------------------------- subsets


@dataclass(frozen=True)
class SubsetPlan:
    p: int
    M: int
    d: int
    subsets: tuple[np.ndarray, ...]
    seed: int

    @property
    def coverage(self) -> np.ndarray:
        """Number of subsets containing each variable."""
        counts = np.zeros(self.p, dtype=int)
        for s in self.subsets:
            counts[s] += 1
        return counts


def sample_subsets(p: int, M: int, d: int, seed: int) -> SubsetPlan:
    """Draw ``M`` independent sorted subsets of ``d`` distinct variables."""
    if not 1 <= d < p:
        raise ValidationError(f"subset size must satisfy 1 <= d < p (d={d}, p={p})")
    if M < 1:
        raise ValidationError("M must be at least 1")
    rng = np.random.default_rng(seed)
    subsets = tuple(np.sort(rng.choice(p, size=d, replace=False)) for _ in range(M))
    plan = SubsetPlan(p, M, d, subsets, seed)
    missing = int((plan.coverage == 0).sum())
    if missing:
        warnings.warn(f"{missing} of {p} variables appear in no subset", CoverageWarning, stacklevel=2)
    return plan


def full_plan(p: int, seed: int = 0) -> SubsetPlan:
    """A single subset holding every variable."""
    return SubsetPlan(p, 1, p, (np.arange(p),), seed)


# ------------------------------------------------------------- similarity


def _condensed_offset(N: int, i: int) -> int:
    return N * i - i * (i + 1) // 2


class SimilarityAccumulator:
    """Running sum of posterior inner products over pixel pairs ``i < j``.

    Storage is the condensed upper triangle (scipy ordering); the diagonal
    is implicit and equals ``count``.
    """

    def __init__(self, N: int, dtype=np.float64, chunk: int = 512):
        if N < 1:
            raise ValidationError("accumulator needs N >= 1")
        self.N = N
        self.count = 0
        self.chunk = chunk
        self.sums = np.zeros(N * (N - 1) // 2, dtype=dtype)

    def add(self, z: np.ndarray) -> "SimilarityAccumulator":
        z = np.asarray(z, dtype=float)
        if z.ndim != 2 or z.shape[0] != self.N:
            raise ValidationError(f"posterior has {z.shape[0]} rows, accumulator expects {self.N}")
        N = self.N
        for a in range(0, N - 1, self.chunk):
            b = min(a + self.chunk, N - 1)
            prod = z[a:b] @ z[a:].T
            for i in range(a, b):
                off = _condensed_offset(N, i)
                self.sums[off : off + N - i - 1] += prod[i - a, i - a + 1 :]
        self.count += 1
        return self

    def condensed(self) -> np.ndarray:
        if self.count == 0:
            raise ValidationError("no subsets accumulated")
        return self.sums / self.count

    def matrix(self) -> np.ndarray:
        """Square averaged similarity with unit diagonal."""
        c = self.condensed().astype(float)
        S = np.eye(self.N)
        iu = np.triu_indices(self.N, 1)
        S[iu] = c
        S[iu[1], iu[0]] = c
        return S


def accumulate_similarity(acc: SimilarityAccumulator, posteriors) -> SimilarityAccumulator:
    return acc.add(posteriors)


# ---------------------------------------------------------------- linkage


def _square(D) -> np.ndarray:
    D = np.asarray(D, dtype=float)
    if D.ndim == 1:
        N = int(round((1 + np.sqrt(1 + 8 * D.size)) / 2))
        if N * (N - 1) // 2 != D.size:
            raise ValidationError("condensed dissimilarity has an invalid length")
        Q = np.zeros((N, N))
        iu = np.triu_indices(N, 1)
        Q[iu] = D
        Q[iu[1], iu[0]] = D
        return Q
    if D.ndim != 2 or D.shape[0] != D.shape[1]:
        raise ValidationError("dissimilarity must be square")
    if not np.allclose(D, D.T, rtol=0, atol=0) or np.any(np.diag(D) != 0):
        raise ValidationError("dissimilarity must be symmetric with zero diagonal")
    return D.copy()


def complete_linkage_cut(D, G: int) -> np.ndarray:
    """Complete-linkage agglomeration stopped at ``G`` clusters.

    A cluster is named by its smallest member.  Each step merges the pair
    of clusters with the smallest maximum inter-member dissimilarity; ties
    go to the lexicographically smallest pair of names.  Labels ``1..G``
    are assigned in order of first appearance.
    """
    W = _square(D)
    N = W.shape[0]
    if not 1 <= G <= N:
        raise ValidationError(f"need 1 <= G <= N (G={G}, N={N})")
    W[np.tril_indices(N)] = np.inf  # only W[a, b] with a < b is consulted
    active = np.ones(N, dtype=bool)
    parent = np.arange(N)
    nn = np.full(N, -1)
    nd = np.full(N, np.inf)

    def refresh(a):
        row = W[a, a + 1 :]
        if row.size:
            k = int(np.argmin(row))
            nn[a], nd[a] = a + 1 + k, row[k]
        else:
            nn[a], nd[a] = -1, np.inf

    for a in range(N):
        refresh(a)

    for _ in range(N - G):
        a = int(np.argmin(nd))
        b = int(nn[a])
        # merged distances: column part (k < a), between part (a < k < b), row part (k > b)
        W[:a, a] = np.maximum(W[:a, a], W[:a, b])
        W[a, a + 1 : b] = np.maximum(W[a, a + 1 : b], W[a + 1 : b, b])
        W[a, b + 1 :] = np.maximum(W[a, b + 1 :], W[b, b + 1 :])
        W[:, b] = np.inf
        W[b, :] = np.inf
        active[b] = False
        nd[b] = np.inf
        nn[b] = -1
        parent[parent == b] = a
        refresh(a)
        for c in np.flatnonzero((nn == a) | (nn == b)):
            if c != a:
                refresh(c)

    _, labels = np.unique(parent, return_inverse=True)
    return labels + 1


# -------------------------------------------------------------- ensemble


@dataclass
class EnsembleResult:
    """Per-subset fits retained for consensus and later classification."""

    plan: SubsetPlan
    models: list[MixtureModel]
    posteriors: np.ndarray  # (M, N, G)
    converged: np.ndarray
    iterations: np.ndarray
    logliks: np.ndarray
    constraints: ConstraintSet
    G: int
    q: int
    labels: np.ndarray | None = None  # final training consensus labels
    center: np.ndarray | None = None
    scale: np.ndarray | None = None

    @property
    def M(self) -> int:
        return len(self.models)

    @property
    def n_pixels(self) -> int:
        return self.posteriors.shape[1]

    def transform(self, X: np.ndarray) -> np.ndarray:
        if self.center is None:
            return X
        return (X - self.center) / self.scale

    def to_dict(self) -> dict:
        return {
            "G": self.G,
            "q": self.q,
            "p": self.plan.p,
            "M": self.M,
            "d": self.plan.d,
            "seed": self.plan.seed,
            "n_pixels": self.n_pixels,
            "subsets": [s.tolist() for s in self.plan.subsets],
            "models": [m.to_dict() for m in self.models],
            "converged": [bool(c) for c in self.converged],
            "iterations": [int(i) for i in self.iterations],
            "logliks": [float(v) for v in self.logliks],
            "constraints": self.constraints.to_dict(),
            "labels": None if self.labels is None else [int(v) for v in self.labels],
            "standardize": None
            if self.center is None
            else {"center": self.center.tolist(), "scale": self.scale.tolist()},
        }


def cluster_uncertainty(ensemble) -> np.ndarray:
    """``u_n`` as the subset average of one minus the largest posterior."""
    z = ensemble.posteriors if isinstance(ensemble, EnsembleResult) else np.asarray(ensemble)
    if z.ndim != 3 or z.shape[0] == 0:
        raise ValidationError("uncertainty needs a non-empty (M, N, G) posterior stack")
    return (1.0 - z.max(axis=2)).mean(axis=0)


def save_ensemble(ensemble: EnsembleResult, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    doc = ensemble.to_dict()
    doc["posteriors"] = {"file": "posteriors.bin", "dtype": "<f8", "shape": list(ensemble.posteriors.shape)}
    np.ascontiguousarray(ensemble.posteriors, dtype="<f8").tofile(directory / "posteriors.bin")
    with open(directory / "ensemble.json", "w") as fh:
        json.dump(doc, fh, sort_keys=True)
        fh.write("\n")
    return directory


def load_ensemble(directory) -> EnsembleResult:
    directory = Path(directory)
    try:
        with open(directory / "ensemble.json") as fh:
            doc = json.load(fh)
        shape = tuple(doc["posteriors"]["shape"])
        z = np.fromfile(directory / doc["posteriors"]["file"], dtype="<f8")
    except (OSError, json.JSONDecodeError, KeyError) as exc:
        raise UnreadableFileError(f"cannot read ensemble archive {directory}: {exc}") from exc
    if z.size != int(np.prod(shape)):
        raise UnreadableFileError(f"{directory}: posterior payload does not match {shape}")
    plan = SubsetPlan(
        doc["p"], doc["M"], doc["d"], tuple(np.array(s, dtype=np.int64) for s in doc["subsets"]), doc["seed"]
    )
    std = doc.get("standardize")
    return EnsembleResult(
        plan=plan,
        models=[MixtureModel.from_dict(m) for m in doc["models"]],
        posteriors=z.reshape(shape),
        converged=np.array(doc["converged"], dtype=bool),
        iterations=np.array(doc["iterations"], dtype=int),
        logliks=np.array(doc["logliks"], dtype=float),
        constraints=ConstraintSet.from_dict(doc["constraints"]),
        G=doc["G"],
        q=doc["q"],
        labels=None if doc["labels"] is None else np.array(doc["labels"], dtype=int),
        center=None if std is None else np.array(std["center"]),
        scale=None if std is None else np.array(std["scale"]),
    )


# -------------------------------------------------------------- pipeline


@dataclass
class ConsensusResult:
    labels: np.ndarray
    uncertainty: np.ndarray
    ensemble: EnsembleResult
    achieved_clusters: int
    representatives: np.ndarray  # index of the representative pixel of each unique profile
    inverse: np.ndarray  # pixel -> representative slot
    similarity_condensed: np.ndarray | None = field(default=None, repr=False)

    def similarity(self) -> np.ndarray:
        """Full ``N x N`` averaged similarity (requires ``keep_similarity``)."""
        if self.similarity_condensed is None:
            raise ValidationError("similarity was not retained; rerun with keep_similarity=True")
        U = len(self.representatives)
        S = np.eye(U)
        iu = np.triu_indices(U, 1)
        S[iu] = self.similarity_condensed
        S[iu[1], iu[0]] = self.similarity_condensed
        # identical profiles are one object: similarity 1 among them
        return S[np.ix_(self.inverse, self.inverse)]

    def summary(self) -> dict:
        e = self.ensemble
        return {
            "G": e.G,
            "q": e.q,
            "M": e.M,
            "d": e.plan.d,
            "p": e.plan.p,
            "seed": e.plan.seed,
            "n_pixels": int(self.labels.size),
            "n_unique_profiles": int(len(self.representatives)),
            "achieved_clusters": int(self.achieved_clusters),
            "cluster_sizes": np.bincount(self.labels, minlength=e.G + 1)[1:].tolist(),
            "converged": [bool(c) for c in e.converged],
            "iterations": [int(i) for i in e.iterations],
            "mean_uncertainty": float(self.uncertainty.mean()),
        }


def _fit_subset(args):
    X, cons, G, q, opts = args
    with threadpool_limits(limits=1):
        return aecm.fit_constrained_pgmm(X, cons, G, q, opts)


def _standardize(X):
    center = X.mean(axis=0)
    scale = X.std(axis=0)
    scale[scale == 0] = 1.0
    return center, scale


def subset_seeds(seed: int, M: int) -> list[int]:
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(M)]


def run_ensemble(
    table,
    cons: ConstraintSet | None,
    G: int,
    q: int,
    plan: SubsetPlan,
    opts: aecm.FitOptions = aecm.FitOptions(),
    parallelism: int = 1,
    standardize: bool = False,
) -> EnsembleResult:
    """Fit one constrained PGMM per subset of the plan."""
    X = _as_matrix(table)
    if X.shape[1] != plan.p:
        raise ValidationError(f"plan is for p={plan.p}, data has {X.shape[1]} variables")
    cons = cons if cons is not None else ConstraintSet.empty()
    center = scale = None
    if standardize:
        center, scale = _standardize(X)
        X = (X - center) / scale
    seeds = subset_seeds(opts.seed, plan.M)
    tasks = [
        (np.ascontiguousarray(X[:, s]), cons, G, q, replace(opts, seed=seeds[m]))
        for m, s in enumerate(plan.subsets)
    ]
    if parallelism > 1 and plan.M > 1:
        with ProcessPoolExecutor(min(parallelism, plan.M), mp_context=get_context("spawn")) as pool:
            fits = list(pool.map(_fit_subset, tasks))
        for f in fits:  # observers live in this process
            aecm._notify(f)
    else:
        fits = [_fit_subset(t) for t in tasks]
    for m, f in enumerate(fits):
        if not f.converged:
            warnings.warn(
                f"subset {m} stopped after {f.iterations} iterations without converging",
                ConvergenceWarning,
                stacklevel=2,
            )
    return EnsembleResult(
        plan=plan,
        models=[f.model for f in fits],
        posteriors=np.stack([f.posteriors for f in fits]),
        converged=np.array([f.converged for f in fits]),
        iterations=np.array([f.iterations for f in fits]),
        logliks=np.array([f.loglik for f in fits]),
        constraints=cons,
        G=G,
        q=q,
        center=center,
        scale=scale,
    )


def consensus_from_ensemble(
    ensemble: EnsembleResult, keep_similarity: bool = False, similarity_dtype=np.float64
) -> ConsensusResult:
    """Similarity, linkage cut and uncertainty from fitted subsets.

    Pixels whose posterior rows coincide in every subset (all members of a
    positive block, exact duplicates) are one object for the linkage.
    """
    z = ensemble.posteriors
    M, N, G = z.shape
    profiles = np.ascontiguousarray(z.transpose(1, 0, 2).reshape(N, M * G))
    _, reps, inverse = np.unique(profiles, axis=0, return_index=True, return_inverse=True)
    inverse = inverse.reshape(-1)
    # order representatives by first appearance so labels follow pixel order
    order = np.argsort(reps, kind="stable")
    rank = np.empty_like(order)
    rank[order] = np.arange(order.size)
    reps, inverse = reps[order], rank[inverse]
    U = reps.size

    if U == 1:
        rep_labels, cond = np.ones(1, dtype=int), np.zeros(0)
    else:
        acc = SimilarityAccumulator(U, dtype=similarity_dtype)
        for m in range(M):
            acc.add(z[m, reps])
        cond = np.clip(acc.condensed().astype(float), 0.0, 1.0)
        rep_labels = complete_linkage_cut(1.0 - cond, min(G, U))
    achieved = int(rep_labels.max())
    if achieved < G:
        warnings.warn(
            f"only {achieved} distinct clusters are attainable from {U} unique profiles",
            ClusterShortfallWarning,
            stacklevel=2,
        )
    labels = rep_labels[inverse]
    ensemble.labels = labels
    return ConsensusResult(
        labels=labels,
        uncertainty=cluster_uncertainty(ensemble),
        ensemble=ensemble,
        achieved_clusters=achieved,
        representatives=reps,
        inverse=inverse,
        similarity_condensed=cond if keep_similarity else None,
    )


def run_ccpgmm(
    table,
    cons: ConstraintSet | None,
    G: int,
    q: int,
    M: int,
    d: int,
    opts: aecm.FitOptions = aecm.FitOptions(),
    parallelism: int = 1,
    plan: SubsetPlan | None = None,
    standardize: bool = False,
    keep_similarity: bool = False,
    similarity_dtype=np.float64,
) -> ConsensusResult:
    """Full consensus pipeline: subsets, per-subset fits, similarity, linkage."""
    X = _as_matrix(table)
    p = X.shape[1]
    if plan is None:
        plan = sample_subsets(p, M, d, opts.seed)
    if not 1 <= q < plan.d:
        raise ValidationError(f"q must satisfy 1 <= q < d (q={q}, d={plan.d})")
    ensemble = run_ensemble(X, cons, G, q, plan, opts, parallelism, standardize)
    return consensus_from_ensemble(ensemble, keep_similarity, similarity_dtype)


def export_rasters(labels, uncertainty, table: PixelTable, directory) -> list[Path]:
    """Label (u16) and uncertainty (f64) rasters per source image."""
    directory = Path(directory)
    written = []
    lab = table.split(np.asarray(labels))
    unc = table.split(np.asarray(uncertainty, dtype=float))
    for image_id in table.image_ids:
        written.append(save_raster(directory / f"{image_id}.labels.json", image_id, lab[image_id], "u16"))
        written.append(save_raster(directory / f"{image_id}.uncertainty.json", image_id, unc[image_id], "f64"))
    return written


def export_result(result: ConsensusResult, table: PixelTable, directory) -> list[Path]:
    return export_rasters(result.labels, result.uncertainty, table, directory)


def cluster_similarity(posteriors: np.ndarray, labels: np.ndarray, G: int) -> np.ndarray:
    """Mean averaged similarity between (and within) final clusters.

    Entry ``(a, b)`` averages ``S_ij`` over pixel pairs with ``i`` in cluster
    ``a`` and ``j != i`` in cluster ``b``; it is computed from per-cluster
    posterior sums, so no ``N x N`` matrix is formed.
    """
    z = np.asarray(posteriors)
    M = z.shape[0]
    onehot = np.zeros((z.shape[1], G))
    onehot[np.arange(z.shape[1]), np.asarray(labels) - 1] = 1.0
    sizes = onehot.sum(axis=0)
    total = np.zeros((G, G))
    self_terms = np.zeros(G)
    for m in range(M):
        sums = onehot.T @ z[m]  # (G clusters, G components)
        total += sums @ sums.T
        self_terms += onehot.T @ (z[m] ** 2).sum(axis=1)
    total /= M
    self_terms /= M
    pairs = np.outer(sizes, sizes)
    within = sizes * (sizes - 1)
    total[np.diag_indices(G)] -= self_terms
    pairs[np.diag_indices(G)] = within
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(pairs > 0, total / np.where(pairs > 0, pairs, 1), np.nan)
    return out
