"""Slow, direct reference implementations used only by the tests."""

from __future__ import annotations

import itertools
import math

import numpy as np


def dense_logpdf(x, mu, lam, psi):
    """Gaussian log density with the full covariance built and Cholesky-factored."""
    sigma = lam @ lam.T + np.diag(psi)
    L = np.linalg.cholesky(sigma)
    r = np.linalg.solve(L, np.asarray(x) - mu)
    return -0.5 * (len(mu) * math.log(2 * math.pi) + 2 * np.log(np.diag(L)).sum() + r @ r)


def dense_beta(lam, psi):
    return lam.T @ np.linalg.inv(lam @ lam.T + np.diag(psi))


def mixture_logs(X, tau, mu, lam, psi):
    """``(N, G)`` of ``log tau_g + log N(x_n | g)`` via the dense oracle."""
    return np.array(
        [[math.log(tau[g]) + dense_logpdf(x, mu[g], lam[g], psi[g]) for g in range(len(tau))] for x in X]
    )


def enumerate_constrained_loglik(X, tau, mu, lam, psi, blocks, negative):
    """Sum over every assignment of blocks (and free pixels) to components.

    Exponential; only for a handful of pixels.
    """
    N, G = X.shape[0], len(tau)
    logs = mixture_logs(X, tau, mu, lam, psi)
    owner = {i: b for b, members in enumerate(blocks) for i in members}
    free = [i for i in range(N) if i not in owner]
    total = -math.inf
    for cfg in itertools.product(range(G), repeat=len(blocks)):
        if any(cfg[a] == cfg[b] for a, b in negative):
            continue
        s = sum(logs[i, cfg[b]] for b, members in enumerate(blocks) for i in members)
        total = np.logaddexp(total, s)
    for i in free:
        total += np.logaddexp.reduce(logs[i])
    return float(total)


def enumerate_block_posteriors(logs_by_block, negative, G):
    """Marginal block posteriors from the joint over admissible assignments."""
    K = len(logs_by_block)
    w = {}
    for cfg in itertools.product(range(G), repeat=K):
        if any(cfg[a] == cfg[b] for a, b in negative):
            continue
        w[cfg] = sum(logs_by_block[k][cfg[k]] for k in range(K))
    m = max(w.values())
    Z = sum(math.exp(v - m) for v in w.values())
    out = np.zeros((K, G))
    for cfg, v in w.items():
        for k in range(K):
            out[k, cfg[k]] += math.exp(v - m) / Z
    return out


def weighted_means(X, z):
    G = z.shape[1]
    mus, taus = [], []
    for g in range(G):
        num = np.zeros(X.shape[1])
        den = 0.0
        for x, w in zip(X, z[:, g]):
            num += w * x
            den += w
        mus.append(num / den)
        taus.append(den / len(X))
    return np.array(taus), np.array(mus)


def naive_complete_linkage(D, G):
    """Repeatedly merge the closest pair of clusters, recomputing every distance.

    Clusters are named by their smallest member; ties go to the
    lexicographically smallest pair of names.
    """
    D = np.asarray(D)
    clusters = [[i] for i in range(D.shape[0])]
    while len(clusters) > G:
        best = None
        for a in range(len(clusters)):
            for b in range(a + 1, len(clusters)):
                d = max(D[i, j] for i in clusters[a] for j in clusters[b])
                key = (d, min(clusters[a]), min(clusters[b]))
                if best is None or key < best[0]:
                    best = (key, a, b)
        _, a, b = best
        clusters[a] = clusters[a] + clusters[b]
        del clusters[b]
        clusters.sort(key=min)
    labels = np.empty(D.shape[0], dtype=int)
    for k, members in enumerate(sorted(clusters, key=min)):
        labels[members] = k + 1
    return labels


def pair_counting_ari(a, b):
    """ARI from the four pair counts over all ``C(n, 2)`` item pairs."""
    n11 = n10 = n01 = n00 = 0
    for i, j in itertools.combinations(range(len(a)), 2):
        sa, sb = a[i] == a[j], b[i] == b[j]
        if sa and sb:
            n11 += 1
        elif sa:
            n10 += 1
        elif sb:
            n01 += 1
        else:
            n00 += 1
    denom = (n00 + n01) * (n01 + n11) + (n00 + n10) * (n10 + n11)
    if denom == 0:
        return 1.0 if (n10 == 0 and n01 == 0) else 0.0
    return 2.0 * (n00 * n11 - n01 * n10) / denom


def set_partitions(n):
    """All partitions of ``range(n)`` as restricted-growth label vectors."""
    def grow(prefix, top):
        if len(prefix) == n:
            yield tuple(prefix)
            return
        for k in range(top + 2):
            yield from grow(prefix + [k], max(top, k))

    if n == 0:
        return [()]
    return list(grow([0], 0))


def best_permutation(A):
    """Lexicographically first permutation of maximal total agreement."""
    G = A.shape[0]
    best, arg = None, None
    for perm in itertools.permutations(range(G)):
        s = sum(A[k, perm[k]] for k in range(G))
        if best is None or s > best:
            best, arg = s, perm
    return np.array(arg)
