"""Constraint bookkeeping for block posteriors and the constrained likelihood.

Blocks are grouped into connected components of the negative relation.  A
component with a single block is a positive-only unit.  For larger
components two semantics are available:

``exact``
    enumerate every assignment of the component's blocks to mixture
    components that respects all negative pairs; a block's posterior is
    the marginal of that joint distribution.
``pairwise``
    a block's weight for component ``g`` is its own mass times, for each
    negatively related partner, the partner's mass on components other
    than ``g``.

Both coincide for a single negative pair.  The likelihood reported by
:func:`unit_loglik` is always the exact joint one.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.sparse.csgraph import connected_components

from .errors import InfeasibleConstraintsError, ValidationError

MODES = ("exact", "pairwise")
MAX_ENUMERATION = 1 << 22


@dataclass(frozen=True)
class Unit:
    blocks: np.ndarray  # block ids in this connected component
    configs: np.ndarray | None  # (n_configs, len(blocks)) admissible assignments


@dataclass(frozen=True)
class CompiledConstraints:
    n_pixels: int
    G: int
    mode: str
    order: np.ndarray  # concatenated block members
    starts: np.ndarray  # reduceat offsets into ``order``
    block_sizes: np.ndarray
    free: np.ndarray  # mask of unconstrained pixels
    units: tuple[Unit, ...]
    partners: tuple[np.ndarray, ...]
    relation: np.ndarray

    @property
    def n_blocks(self) -> int:
        return len(self.block_sizes)


def logsumexp(a, axis=None, keepdims=False):
    """``log(sum(exp(a)))`` with max-shift; rows of all ``-inf`` give ``-inf``."""
    a = np.asarray(a, dtype=float)
    m = np.max(a, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(a - m), axis=axis, keepdims=True)) + m
    if not keepdims:
        out = np.squeeze(out, axis=axis) if axis is not None else out.reshape(())
    return out


def _admissible(k: int, G: int, rel: np.ndarray) -> np.ndarray:
    if G**k > MAX_ENUMERATION:
        raise ValidationError(
            f"exact enumeration of {k} mutually constrained blocks over {G} components "
            f"needs {G**k} configurations; use negative_mode='pairwise'"
        )
    grid = np.indices((G,) * k).reshape(k, -1).T
    ok = np.ones(len(grid), dtype=bool)
    for a, b in zip(*np.nonzero(np.triu(rel))):
        ok &= grid[:, a] != grid[:, b]
    return np.ascontiguousarray(grid[ok])


def compile_constraints(cons, n_pixels: int, G: int, mode: str = "exact") -> CompiledConstraints:
    if mode not in MODES:
        raise ValidationError(f"negative_mode must be one of {MODES}, got {mode!r}")
    cons.check(n_pixels)
    k = cons.n_blocks
    rel = cons.relation
    if k and G == 1 and rel.any():
        raise InfeasibleConstraintsError("negative constraints need at least two components")
    if k:
        order = np.concatenate(cons.blocks)
        sizes = np.array([len(b) for b in cons.blocks])
        starts = np.concatenate([[0], np.cumsum(sizes)[:-1]])
    else:
        order = np.zeros(0, dtype=np.int64)
        sizes = starts = np.zeros(0, dtype=np.int64)
    free = ~cons.constrained_mask(n_pixels)

    units = []
    if k:
        n_comp, comp = connected_components(rel.astype(np.int8), directed=False)
        for c in range(n_comp):
            members = np.flatnonzero(comp == c)
            configs = None
            if len(members) > 1 and mode == "exact":
                configs = _admissible(len(members), G, rel[np.ix_(members, members)])
                if len(configs) == 0:
                    raise InfeasibleConstraintsError(
                        f"blocks {members.tolist()} cannot be placed in {G} components "
                        "without violating a negative constraint"
                    )
            units.append(Unit(members, configs))
    partners = tuple(np.flatnonzero(rel[i]) for i in range(k))
    return CompiledConstraints(
        n_pixels, G, mode, order, starts, sizes, free, tuple(units), partners, rel
    )


def block_log_mass(log_weighted: np.ndarray, cc: CompiledConstraints) -> np.ndarray:
    """``(K, G)`` sums of ``log tau_g + log N(x_j | g)`` over each block."""
    if cc.n_blocks == 0:
        return np.zeros((0, log_weighted.shape[1]))
    return np.add.reduceat(log_weighted[cc.order], cc.starts, axis=0)


def _excluded_mass(row: np.ndarray) -> np.ndarray:
    """log sum_{f != g} exp(row[f]) for every g."""
    G = row.shape[0]
    out = np.empty(G)
    for g in range(G):
        out[g] = logsumexp(np.delete(row, g))
    return out


def block_posteriors(bm: np.ndarray, cc: CompiledConstraints) -> np.ndarray:
    """Normalised ``(K, G)`` posterior rows for each block."""
    K, G = bm.shape
    z = np.zeros((K, G))
    if cc.mode == "pairwise":
        excluded = [_excluded_mass(bm[i]) if len(cc.partners[i]) else None for i in range(K)]
        for i in range(K):
            logw = bm[i].copy()
            for r in cc.partners[i]:
                logw += excluded[r]
            z[i] = np.exp(logw - logsumexp(logw))
    else:
        for unit in cc.units:
            if unit.configs is None:
                i = unit.blocks[0]
                z[i] = np.exp(bm[i] - logsumexp(bm[i]))
                continue
            cfg = unit.configs
            cm = np.zeros(len(cfg))
            for col, i in enumerate(unit.blocks):
                cm += bm[i, cfg[:, col]]
            w = np.exp(cm - logsumexp(cm))
            for col, i in enumerate(unit.blocks):
                z[i] = np.bincount(cfg[:, col], weights=w, minlength=G)
    return z / z.sum(axis=1, keepdims=True)


def unit_loglik(bm: np.ndarray, cc: CompiledConstraints) -> float:
    """Log of the total admissible mass of every block unit (exact joint form)."""
    total = 0.0
    G = bm.shape[1] if bm.ndim == 2 else cc.G
    for unit in cc.units:
        if len(unit.blocks) == 1:
            total += float(logsumexp(bm[unit.blocks[0]]))
            continue
        cfg = unit.configs
        if cfg is None:  # pairwise mode still reports the exact likelihood
            sub = cc.relation[np.ix_(unit.blocks, unit.blocks)]
            cfg = _admissible(len(unit.blocks), G, sub)
        cm = np.zeros(len(cfg))
        for col, i in enumerate(unit.blocks):
            cm += bm[i, cfg[:, col]]
        total += float(logsumexp(cm))
    return total


def pair_joint(bm: np.ndarray, cc: CompiledConstraints, a: int, b: int) -> np.ndarray:
    """``(G, G)`` joint probability that blocks ``a`` and ``b`` take components (g, f).

    Under ``exact`` this marginalises the enumerated configurations of the
    unit holding both blocks; under ``pairwise`` it is the two-block form
    ``m_a(g) m_b(f)`` restricted to ``f != g`` when the pair is negative.
    """
    G = bm.shape[1]
    joint = np.zeros((G, G))
    if cc.mode == "exact":
        for unit in cc.units:
            blocks = list(unit.blocks)
            if a in blocks and b in blocks and unit.configs is not None:
                cfg = unit.configs
                cm = np.zeros(len(cfg))
                for col, i in enumerate(blocks):
                    cm += bm[i, cfg[:, col]]
                w = np.exp(cm - logsumexp(cm))
                np.add.at(joint, (cfg[:, blocks.index(a)], cfg[:, blocks.index(b)]), w)
                return joint
    logj = bm[a][:, None] + bm[b][None, :]
    if cc.relation[a, b]:
        logj[np.diag_indices(G)] = -np.inf
    return np.exp(logj - logsumexp(logj))
