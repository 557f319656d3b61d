"""Two-cycle AECM fitting of a constrained mixture of factor analyzers.

Each iteration runs

1. E-step for component memberships (blocks and free pixels), then the
   conditional maximisation of mixing weights and means;
2. a second membership E-step with the refreshed weights and means, the
   expected factor statistics, and the conditional maximisation of the
   loadings and specific variances.

Convergence is declared when the relative change of the constrained
observed log-likelihood drops below ``rel_tol``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve
from scipy.special import logsumexp

from . import _blocks
from .errors import ComponentCollapseError, SingularMatrixError, ValidationError
from .hsi import ConstraintSet
from .pgmm import (
    PSI_FLOOR,
    MixtureModel,
    _as_matrix,
    _capacitance,
    init_params,
    kmeans,
    log_weighted_densities,
)

log = logging.getLogger(__name__)

_observers: list[Callable] = []


def add_fit_observer(fn: Callable) -> None:
    """Register ``fn(result)`` to be called after every completed fit."""
    _observers.append(fn)


def remove_fit_observer(fn: Callable) -> None:
    _observers.remove(fn)


@dataclass(frozen=True)
class FitOptions:
    max_iterations: int = 1000
    rel_tol: float = 1e-6
    seed: int = 0
    psi_floor: float = PSI_FLOOR
    negative_mode: str = "exact"

    def __post_init__(self):
        if not self.rel_tol > 0:
            raise ValidationError("rel_tol must be positive")
        if self.max_iterations < 1:
            raise ValidationError("max_iterations must be at least 1")
        if not self.psi_floor > 0:
            raise ValidationError("psi_floor must be positive")
        if self.negative_mode not in _blocks.MODES:
            raise ValidationError(f"negative_mode must be one of {_blocks.MODES}")


@dataclass(frozen=True)
class FitResult:
    model: MixtureModel
    posteriors: np.ndarray
    loglik_trace: np.ndarray
    converged: bool
    iterations: int
    init_labels: np.ndarray = field(repr=False, default=None)
    constraints: ConstraintSet | None = field(repr=False, default=None)

    @property
    def map_labels(self) -> np.ndarray:
        return self.posteriors.argmax(axis=1) + 1

    @property
    def loglik(self) -> float:
        return float(self.loglik_trace[-1])


@dataclass(frozen=True)
class FactorStats:
    n: float
    beta: np.ndarray  # (q, p)
    S: np.ndarray  # (p, p)
    phi: np.ndarray  # (q, q)


# ------------------------------------------------------------------ E-steps


def _softmax_rows(L):
    return np.exp(L - _blocks.logsumexp(L, axis=1, keepdims=True))


def estep_unconstrained(table, model: MixtureModel) -> np.ndarray:
    """Posterior membership rows ignoring constraints (all ``N`` pixels)."""
    return _softmax_rows(log_weighted_densities(_as_matrix(table), model))


def estep_blocks(table, model: MixtureModel, cons: ConstraintSet, mode: str = "exact") -> np.ndarray:
    """Shared posterior row of each positive block, shape ``(K, G)``."""
    X = _as_matrix(table)
    cc = _blocks.compile_constraints(cons, X.shape[0], model.G, mode)
    L = log_weighted_densities(X, model)
    return _blocks.block_posteriors(_blocks.block_log_mass(L, cc), cc)


def _posteriors(L: np.ndarray, cc: _blocks.CompiledConstraints) -> tuple[np.ndarray, float]:
    """Full posterior matrix and constrained log-likelihood from log weights."""
    lse = _blocks.logsumexp(L, axis=1, keepdims=True)
    z = np.exp(L - lse)
    if cc.n_blocks == 0:
        return z, float(lse.sum())
    ll = float(lse[cc.free].sum())
    bm = _blocks.block_log_mass(L, cc)
    ll += _blocks.unit_loglik(bm, cc)
    zb = _blocks.block_posteriors(bm, cc)
    for i in range(cc.n_blocks):
        start = cc.starts[i]
        z[cc.order[start : start + cc.block_sizes[i]]] = zb[i]
    return z, ll


def posteriors(table, model: MixtureModel, cons: ConstraintSet | None = None, mode: str = "exact"):
    """Posterior matrix with block rows substituted, and the constrained log-likelihood."""
    X = _as_matrix(table)
    cons = cons if cons is not None else ConstraintSet.empty()
    cc = _blocks.compile_constraints(cons, X.shape[0], model.G, mode)
    return _posteriors(log_weighted_densities(X, model), cc)


def pair_joint_posterior(table, model, cons, a: int, b: int, mode: str = "exact") -> np.ndarray:
    """Joint ``(G, G)`` probability of blocks ``a`` and ``b`` taking components ``(g, f)``."""
    X = _as_matrix(table)
    cc = _blocks.compile_constraints(cons, X.shape[0], model.G, mode)
    bm = _blocks.block_log_mass(log_weighted_densities(X, model), cc)
    return _blocks.pair_joint(bm, cc, a, b)


# ----------------------------------------------------------------- CM-steps


def cm_cycle1(table, z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mixing weights and means from posterior rows."""
    X = _as_matrix(table)
    N = X.shape[0]
    n = z.sum(axis=0)
    if np.any(n < 10 * np.finfo(float).eps * N):
        bad = np.flatnonzero(n < 10 * np.finfo(float).eps * N) + 1
        raise ComponentCollapseError(f"component(s) {bad.tolist()} have no posterior mass")
    mu = (z.T @ X) / n[:, None]
    return n / N, mu


def estep_factors(table, model: MixtureModel, z: np.ndarray) -> list[FactorStats]:
    """Expected factor statistics ``beta_g``, ``S_g`` and ``Phi_g`` per component."""
    X = _as_matrix(table)
    out = []
    for g in range(model.G):
        lam, psi = model.lam[g], model.psi[g]
        chol, scaled = _capacitance(lam, psi)
        # beta = Lambda^T Sigma^-1 = (I + Lambda^T Psi^-1 Lambda)^-1 Lambda^T Psi^-1
        beta = cho_solve((chol, True), scaled.T)
        w = z[:, g]
        n = float(w.sum())
        xc = X - model.mu[g]
        S = (xc * w[:, None]).T @ xc / n
        phi = np.eye(lam.shape[1]) - beta @ lam + beta @ S @ beta.T
        out.append(FactorStats(n, beta, S, phi))
    return out


def cm_cycle2(stats: list[FactorStats], psi_floor: float = PSI_FLOOR):
    """Loadings and specific variances from the factor statistics."""
    lams, psis = [], []
    for g, st in enumerate(stats):
        sb = st.S @ st.beta.T
        try:
            factor = cho_factor(st.phi, lower=True)
        except LinAlgError as exc:
            raise SingularMatrixError(
                f"Phi for component {g + 1} is singular (cond={np.linalg.cond(st.phi):.3g})"
            ) from exc
        lam = cho_solve(factor, sb.T).T
        psi = np.diag(st.S) - (lam * sb).sum(axis=1)
        lams.append(lam)
        psis.append(np.maximum(psi, psi_floor))
    return np.stack(lams), np.stack(psis)


# -------------------------------------------------------------------- fits


def _check_dims(X, G, q):
    N, p = X.shape
    if not 1 <= q < p:
        raise ValidationError(f"q must satisfy 1 <= q < p (q={q}, p={p})")
    if not 1 <= G <= N:
        raise ValidationError(f"G must satisfy 1 <= G <= N (G={G}, N={N})")


def _notify(result):
    for fn in list(_observers):
        fn(result)
    return result


def _converged(trace, rel_tol):
    prev, cur = trace[-2], trace[-1]
    return abs(cur - prev) < rel_tol * abs(prev)


def fit_constrained_pgmm(
    table,
    cons: ConstraintSet | None,
    G: int,
    q: int,
    opts: FitOptions = FitOptions(),
    init_labels=None,
    callback: Callable | None = None,
) -> FitResult:
    """Fit a constrained PGMM by AECM from a k-means start.

    ``callback(iteration, model)`` is invoked with the initial model and
    after every completed iteration.
    """
    X = _as_matrix(table)
    _check_dims(X, G, q)
    cons = cons if cons is not None else ConstraintSet.empty()
    cc = _blocks.compile_constraints(cons, X.shape[0], G, opts.negative_mode)

    labels = kmeans(X, G, opts.seed) if init_labels is None else np.asarray(init_labels)
    model = init_params(X, labels, q, opts.psi_floor, G=G)
    if callback:
        callback(0, model)

    trace: list[float] = []
    converged = False
    it = 0
    while True:
        z, ll = _posteriors(log_weighted_densities(X, model), cc)
        trace.append(ll)
        if len(trace) > 1 and _converged(trace, opts.rel_tol):
            converged = True
            break
        if it >= opts.max_iterations:
            break
        tau, mu = cm_cycle1(X, z)
        model = model.replace(tau=tau, mu=mu)
        z2, _ = _posteriors(log_weighted_densities(X, model), cc)
        lam, psi = cm_cycle2(estep_factors(X, model, z2), opts.psi_floor)
        model = model.replace(lam=lam, psi=psi)
        it += 1
        if callback:
            callback(it, model)

    if not converged:
        log.warning("AECM stopped after %d iterations without converging", it)
    return _notify(FitResult(model, z, np.array(trace), converged, it, labels, cons))


def fit_pgmm(table, G: int, q: int, opts: FitOptions = FitOptions(), init_labels=None, callback=None) -> FitResult:
    """Plain unconstrained PGMM by AECM (reference path without block handling)."""
    X = _as_matrix(table)
    _check_dims(X, G, q)
    N, p = X.shape
    labels = kmeans(X, G, opts.seed) if init_labels is None else np.asarray(init_labels)
    model = init_params(X, labels, q, opts.psi_floor, G=G)
    if callback:
        callback(0, model)
    trace, converged, it = [], False, 0
    while True:
        L = log_weighted_densities(X, model)
        lse = logsumexp(L, axis=1)
        z = np.exp(L - lse[:, None])
        trace.append(float(lse.sum()))
        if len(trace) > 1 and _converged(trace, opts.rel_tol):
            converged = True
            break
        if it >= opts.max_iterations:
            break
        n = z.sum(axis=0)
        tau, mu = n / N, (z.T @ X) / n[:, None]
        model = model.replace(tau=tau, mu=mu)
        L = log_weighted_densities(X, model)
        z = np.exp(L - logsumexp(L, axis=1)[:, None])
        n = z.sum(axis=0)
        lam_new, psi_new = np.empty_like(model.lam), np.empty_like(model.psi)
        for g in range(G):
            lam, psi = model.lam[g], model.psi[g]
            Pinv_lam = lam / psi[:, None]
            M = np.eye(q) + lam.T @ Pinv_lam
            beta = np.linalg.solve(M, Pinv_lam.T)
            xc = X - mu[g]
            S = (xc * z[:, g : g + 1]).T @ xc / n[g]
            theta = np.eye(q) - beta @ lam + beta @ S @ beta.T
            lam_new[g] = np.linalg.solve(theta.T, (S @ beta.T).T).T
            psi_new[g] = np.maximum(np.diag(S - lam_new[g] @ beta @ S), opts.psi_floor)
        model = model.replace(lam=lam_new, psi=psi_new)
        it += 1
        if callback:
            callback(it, model)
    return _notify(FitResult(model, z, np.array(trace), converged, it, labels))


def check_posteriors(z: np.ndarray, cons: ConstraintSet | None = None, atol: float = 1e-10) -> None:
    """Raise if rows are not distributions or block rows differ."""
    if np.any(z < 0) or np.any(np.abs(z.sum(axis=1) - 1.0) > atol):
        raise ValidationError("posterior rows must be non-negative and sum to 1")
    if cons is not None:
        for i, b in enumerate(cons.blocks):
            if not np.all(z[b] == z[b[0]]):
                raise ValidationError(f"rows of block {i} are not identical")


def is_monotone(trace, rel_slack: float = 1e-8) -> bool:
    trace = np.asarray(trace)
    return bool(np.all(trace[1:] >= trace[:-1] - rel_slack * np.abs(trace[:-1])))


__all__ = [
    "FactorStats",
    "FitOptions",
    "FitResult",
    "add_fit_observer",
    "check_posteriors",
    "cm_cycle1",
    "cm_cycle2",
    "estep_blocks",
    "estep_factors",
    "estep_unconstrained",
    "fit_constrained_pgmm",
    "fit_pgmm",
    "is_monotone",
    "pair_joint_posterior",
    "posteriors",
    "remove_fit_observer",
]

