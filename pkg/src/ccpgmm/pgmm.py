"""Mixtures of factor analyzers: parameters, densities and initialisation.

Component ``g`` has covariance ``Lambda_g Lambda_g^T + Psi_g`` with a
``p x q`` loading matrix and a diagonal ``Psi_g``.  Densities are evaluated
through the Woodbury identity and the matrix determinant lemma, so only
``q x q`` systems are ever factorised.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from . import _blocks
from .errors import ComponentCollapseError, NumericalError, ValidationError

PSI_FLOOR = 1e-6
LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class FactorComponent:
    tau: float
    mu: np.ndarray
    lam: np.ndarray
    psi: np.ndarray

    @property
    def covariance(self) -> np.ndarray:
        return self.lam @ self.lam.T + np.diag(self.psi)


@dataclass(frozen=True)
class MixtureModel:
    """Stacked parameters of a ``G``-component factor-analyzer mixture.

    Attributes
    ----------
    tau : ndarray of shape (G,)
    mu : ndarray of shape (G, p)
    lam : ndarray of shape (G, p, q)
    psi : ndarray of shape (G, p)
        Diagonals of the specific-variance matrices.
    """

    tau: np.ndarray
    mu: np.ndarray
    lam: np.ndarray
    psi: np.ndarray

    @property
    def G(self) -> int:
        return self.tau.shape[0]

    @property
    def p(self) -> int:
        return self.mu.shape[1]

    @property
    def q(self) -> int:
        return self.lam.shape[2]

    @property
    def components(self) -> list[FactorComponent]:
        return [
            FactorComponent(float(self.tau[g]), self.mu[g], self.lam[g], self.psi[g])
            for g in range(self.G)
        ]

    def replace(self, **kw) -> "MixtureModel":
        fields = dict(tau=self.tau, mu=self.mu, lam=self.lam, psi=self.psi)
        fields.update(kw)
        return MixtureModel(**fields)

    def validate(self, psi_floor: float = PSI_FLOOR) -> None:
        G, p, q = self.G, self.p, self.q
        if self.mu.shape != (G, p) or self.lam.shape != (G, p, q) or self.psi.shape != (G, p):
            raise ValidationError("inconsistent mixture parameter shapes")
        if not 1 <= q < p:
            raise ValidationError(f"need 1 <= q < p, got q={q}, p={p}")
        if np.any(self.tau <= 0) or np.any(self.tau > 1):
            raise ValidationError("mixing weights must lie in (0, 1]")
        if abs(float(self.tau.sum()) - 1.0) > 1e-12:
            raise ValidationError("mixing weights must sum to 1")
        if np.any(self.psi < psi_floor):
            raise ValidationError(f"psi entries below the floor {psi_floor}")

    def permute(self, order) -> "MixtureModel":
        """Reorder components; component ``k`` of the result is ``order[k]`` here."""
        order = np.asarray(order)
        return MixtureModel(self.tau[order], self.mu[order], self.lam[order], self.psi[order])

    def to_dict(self) -> dict:
        return {
            "G": self.G,
            "p": self.p,
            "q": self.q,
            "tau": self.tau.tolist(),
            "mu": self.mu.tolist(),
            "lambda": self.lam.tolist(),
            "psi": self.psi.tolist(),
        }

    @classmethod
    def from_dict(cls, doc) -> "MixtureModel":
        G, p, q = int(doc["G"]), int(doc["p"]), int(doc["q"])
        model = cls(
            np.array(doc["tau"], dtype=float).reshape(G),
            np.array(doc["mu"], dtype=float).reshape(G, p),
            np.array(doc["lambda"], dtype=float).reshape(G, p, q),
            np.array(doc["psi"], dtype=float).reshape(G, p),
        )
        return model


# ------------------------------------------------------------------ density


def _capacitance(lam: np.ndarray, psi: np.ndarray):
    """Cholesky factor of ``I_q + Lambda^T Psi^-1 Lambda`` and ``Psi^-1 Lambda``."""
    scaled = lam / psi[:, None]
    cap = np.eye(lam.shape[1]) + lam.T @ scaled
    try:
        chol = np.linalg.cholesky(cap)
    except np.linalg.LinAlgError as exc:  # cannot happen for psi > 0
        raise NumericalError("capacitance matrix is not positive definite") from exc
    return chol, scaled


def logdet_lowrank(lam: np.ndarray, psi: np.ndarray) -> float:
    chol, _ = _capacitance(lam, psi)
    return 2.0 * float(np.log(np.diag(chol)).sum()) + float(np.log(psi).sum())


def _check_psi(psi, psi_floor):
    if np.any(psi < psi_floor):
        raise ValidationError(f"psi below floor {psi_floor}")


def component_logpdf(X: np.ndarray, mu, lam, psi) -> np.ndarray:
    """Row-wise ``log N(x; mu, lam lam^T + diag(psi))`` without a ``p x p`` matrix."""
    p = mu.shape[0]
    chol, scaled = _capacitance(lam, psi)
    logdet = 2.0 * np.log(np.diag(chol)).sum() + np.log(psi).sum()
    xc = X - mu
    proj = solve_triangular(chol, (xc @ scaled).T, lower=True)
    quad = (xc * xc) @ (1.0 / psi) - (proj * proj).sum(axis=0)
    return -0.5 * (p * LOG_2PI + logdet + quad)


def log_density_lowrank(x, comp: FactorComponent, psi_floor: float = PSI_FLOOR) -> float:
    x = np.asarray(x, dtype=float)
    if x.shape != comp.mu.shape:
        raise ValidationError(f"x has shape {x.shape}, component expects {comp.mu.shape}")
    if not np.all(np.isfinite(x)):
        raise ValidationError("non-finite input vector")
    _check_psi(comp.psi, psi_floor)
    return float(component_logpdf(x[None, :], comp.mu, comp.lam, comp.psi)[0])


def log_weighted_densities(X: np.ndarray, model: MixtureModel) -> np.ndarray:
    """``(N, G)`` matrix of ``log tau_g + log N(x_n | g)``."""
    out = np.empty((X.shape[0], model.G))
    for g in range(model.G):
        out[:, g] = math.log(model.tau[g]) + component_logpdf(
            X, model.mu[g], model.lam[g], model.psi[g]
        )
    return out


def _as_matrix(table) -> np.ndarray:
    if isinstance(table, np.ndarray):
        return table if table.dtype == np.float64 else table.astype(float)
    data = getattr(table, "data", None)
    return data if isinstance(data, np.ndarray) else np.asarray(table, dtype=float)


def constrained_log_likelihood(model: MixtureModel, table, cons=None, mode: str = "exact") -> float:
    """Observed log-likelihood with positive blocks and negative relations as units.

    Unconstrained pixels contribute the usual ``log sum_g tau_g N(x|g)``;
    each connected group of blocks contributes the log of its total mass
    over admissible component assignments.
    """
    X = _as_matrix(table)
    if X.shape[1] != model.p:
        raise ValidationError(f"model has p={model.p}, data has {X.shape[1]} columns")
    L = log_weighted_densities(X, model)
    if cons is None or cons.n_blocks == 0:
        return float(_blocks.logsumexp(L, axis=1).sum())
    cc = _blocks.compile_constraints(cons, X.shape[0], model.G, mode)
    free = float(_blocks.logsumexp(L[cc.free], axis=1).sum())
    return free + _blocks.unit_loglik(_blocks.block_log_mass(L, cc), cc)


# ---------------------------------------------------------- initialisation


def init_params(table, labels, q: int, psi_floor: float = PSI_FLOOR, G: int | None = None) -> MixtureModel:
    """Initial parameters from a hard partition with labels in ``1..G``.

    Loadings are the top-``q`` eigenvectors of each cluster covariance scaled
    by the square roots of their (non-negative) eigenvalues.
    """
    X = _as_matrix(table)
    labels = np.asarray(labels)
    N, p = X.shape
    if not 1 <= q < p:
        raise ValidationError(f"need 1 <= q < p, got q={q}, p={p}")
    G = int(labels.max()) if G is None else G
    tau = np.empty(G)
    mu = np.empty((G, p))
    lam = np.empty((G, p, q))
    psi = np.empty((G, p))
    for g in range(G):
        members = X[labels == g + 1]
        n_g = members.shape[0]
        if n_g == 0:
            raise ComponentCollapseError(f"initial cluster {g + 1} is empty")
        tau[g] = n_g / N
        mu[g] = members.mean(axis=0)
        xc = members - mu[g]
        cov = xc.T @ xc / n_g
        vals, vecs = np.linalg.eigh(cov)
        top = np.argsort(vals)[::-1][:q]
        lam[g] = vecs[:, top] * np.sqrt(np.clip(vals[top], 0.0, None))
        psi[g] = np.maximum(np.diag(cov) - (lam[g] ** 2).sum(axis=1), psi_floor)
    tau = tau / tau.sum()
    return MixtureModel(tau, mu, lam, psi)


def kmeans(table, G: int, seed: int, max_iter: int = 100, tol: float = 1e-8) -> np.ndarray:
    """Lloyd's algorithm from greedy k-means++ seeds; returns labels ``1..G``."""
    X = _as_matrix(table)
    N = X.shape[0]
    if not 1 <= G <= N:
        raise ValidationError(f"need 1 <= G <= N, got G={G}, N={N}")
    rng = np.random.default_rng(seed)
    centers = _kmeanspp(X, G, rng)
    for _ in range(max_iter):
        d2 = _sq_dists(X, centers)
        assign = d2.argmin(axis=1)
        new = centers.copy()
        for g in range(G):
            members = assign == g
            if members.any():
                new[g] = X[members].mean(axis=0)
            else:
                # steal the point currently worst served by its centre
                far = int(d2[np.arange(N), assign].argmax())
                new[g] = X[far]
                assign[far] = g
        shift = np.sqrt(((new - centers) ** 2).sum(axis=1)).max()
        centers = new
        if shift < tol:
            break
    return _sq_dists(X, centers).argmin(axis=1) + 1


def _sq_dists(X, centers):
    d2 = (X * X).sum(1)[:, None] - 2.0 * X @ centers.T + (centers * centers).sum(1)[None, :]
    return np.maximum(d2, 0.0)


def _kmeanspp(X, G, rng):
    N = X.shape[0]
    n_trials = 2 + int(math.log(G))
    chosen = [int(rng.integers(N))]
    closest = _sq_dists(X, X[chosen])[:, 0]
    for _ in range(1, G):
        total = closest.sum()
        if total <= 0.0:
            rest = np.setdiff1d(np.arange(N), chosen)
            chosen.append(int(rng.choice(rest)))
        else:
            cand = np.searchsorted(np.cumsum(closest), rng.random(n_trials) * total)
            cand = np.minimum(cand, N - 1)
            cand_d2 = np.minimum(closest[None, :], _sq_dists(X, X[cand]).T)
            best = int(cand_d2.sum(axis=1).argmin())
            chosen.append(int(cand[best]))
        closest = np.minimum(closest, _sq_dists(X, X[chosen[-1:]])[:, 0])
    return X[chosen].astype(float)
