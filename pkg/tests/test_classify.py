import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ccpgmm.aecm import FitOptions
from ccpgmm.classify import (
    AlignmentWarning,
    agreement_matrix,
    align_labels,
    best_assignment,
    classify_pixels,
    mode_vote,
)
from ccpgmm.consensus import full_plan, run_ccpgmm
from ccpgmm.errors import ValidationError
from ccpgmm.hsi import ConstraintSet
from oracles import best_permutation


def onehot(labels, G):
    return np.eye(G)[np.asarray(labels) - 1]


def fitted(seed=0, M=3, d=4, p=6, n=50, sep=10.0):
    rng = np.random.default_rng(seed)
    centres = np.array([np.zeros(p), np.full(p, sep), np.r_[np.full(p // 2, sep), np.full(p - p // 2, -sep)]])
    X = np.vstack([c + rng.normal(size=(n, p)) for c in centres])
    y = np.repeat([1, 2, 3], n)
    cons = ConstraintSet.from_blocks([np.arange(0, 8), np.arange(n, n + 8), np.arange(2 * n, 2 * n + 8)])
    res = run_ccpgmm(X, cons, 3, 1, M, d, FitOptions(seed=seed))
    return res, X, y, centres


class TestAlignment:
    def test_identity(self):
        ref = np.array([1, 1, 2, 3, 3, 2])
        cons = ConstraintSet.from_blocks([[0, 1], [2], [3, 4]])
        al = align_labels(onehot(ref, 3), ref, cons)
        np.testing.assert_array_equal(al.perm, [1, 2, 3])
        assert not al.flagged

    def test_transposition(self):
        ref = np.array([1, 1, 2, 2, 3])
        sub = np.array([2, 2, 1, 1, 3])
        cons = ConstraintSet.from_blocks([[0, 1], [2, 3], [4]])
        np.testing.assert_array_equal(align_labels(onehot(sub, 3), ref, cons).perm, [2, 1, 3])

    def test_uses_only_constrained_pixels(self):
        ref = np.array([1, 2, 1, 1, 1, 1])
        sub = np.array([1, 2, 2, 2, 2, 2])  # unconstrained pixels would favour a swap
        cons = ConstraintSet.from_blocks([[0], [1]])
        np.testing.assert_array_equal(align_labels(onehot(sub, 2), ref, cons).perm, [1, 2])

    def test_fallback_flagged(self):
        ref = np.array([1, 2, 2])
        with pytest.warns(AlignmentWarning):
            al = align_labels(onehot([2, 1, 1], 2), ref)
        assert al.fallback_all_pixels and al.flagged
        np.testing.assert_array_equal(al.perm, [2, 1])

    def test_missing_reference_class_flagged(self):
        ref = np.array([1, 1, 2, 3])
        cons = ConstraintSet.from_blocks([[0, 1]])
        with pytest.warns(AlignmentWarning):
            al = align_labels(onehot([1, 1, 2, 3], 3), ref, cons)
        assert al.missing_reference == (2, 3)
        assert sorted(al.perm) == [1, 2, 3]

    def test_four_by_four_exhaustive(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            A = rng.integers(0, 6, size=(4, 4))
            np.testing.assert_array_equal(best_assignment(A), best_permutation(A))

    @settings(max_examples=60, deadline=None)
    @given(st.integers(1, 6), st.integers(0, 2**31 - 1), st.integers(1, 4))
    def test_matches_enumeration_with_ties(self, G, seed, top):
        A = np.random.default_rng(seed).integers(0, top, size=(G, G))
        np.testing.assert_array_equal(best_assignment(A), best_permutation(A))

    def test_agreement_matrix(self):
        A = agreement_matrix([1, 1, 2, 3], [2, 2, 2, 1], 3)
        np.testing.assert_array_equal(A, [[0, 2, 0], [0, 1, 0], [1, 0, 0]])


class TestVote:
    def test_two_two_three(self):
        labels, u = mode_vote(np.array([[2], [2], [3]]), 4)
        assert labels[0] == 2 and u[0] == pytest.approx(1 / 3)

    def test_tie_to_smaller(self):
        labels, u = mode_vote(np.array([[3, 1], [2, 4]]), 4)
        np.testing.assert_array_equal(labels, [2, 1])
        np.testing.assert_array_equal(u, [0.5, 0.5])

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 9), st.integers(2, 5), st.integers(0, 2**31 - 1))
    def test_uncertainty_lattice(self, M, G, seed):
        votes = np.random.default_rng(seed).integers(1, G + 1, size=(M, 20))
        labels, u = mode_vote(votes, G)
        k = np.round(u * M)
        np.testing.assert_allclose(u * M, k, atol=1e-12)
        assert np.all(u <= 1 - 1 / M + 1e-12)
        for n in range(20):
            counts = np.bincount(votes[:, n], minlength=G + 1)
            assert labels[n] == int(np.argmax(counts[1:])) + 1


class TestClassify:
    def test_far_pixels_from_component(self):
        res, X, y, centres = fitted()
        rng = np.random.default_rng(9)
        for g in range(3):
            new = centres[g] + rng.normal(size=(30, X.shape[1]))
            out = classify_pixels(new, res.ensemble)
            assert set(out.labels) == {int(res.labels[y == g + 1][0])}
            np.testing.assert_array_equal(out.uncertainty, 0.0)

    def test_single_subset_zero_uncertainty(self):
        rng = np.random.default_rng(1)
        X = np.vstack([rng.normal(size=(30, 4)), rng.normal(8, 1, size=(30, 4))])
        cons = ConstraintSet.from_blocks([np.arange(5), np.arange(30, 35)])
        res = run_ccpgmm(X, cons, 2, 1, 1, 4, FitOptions(seed=2), plan=full_plan(4, 2))
        out = classify_pixels(X, res.ensemble)
        np.testing.assert_array_equal(out.uncertainty, 0.0)
        np.testing.assert_array_equal(out.labels, res.labels)

    def test_relabelled_subset_gives_same_result(self):
        res, X, _, _ = fitted(seed=3)
        base = classify_pixels(X, res.ensemble)
        ens = res.ensemble
        ens.models[1] = ens.models[1].permute([2, 0, 1])
        ens.posteriors[1] = ens.posteriors[1][:, [2, 0, 1]]
        again = classify_pixels(X, ens)
        np.testing.assert_array_equal(again.labels, base.labels)
        np.testing.assert_array_equal(again.uncertainty, base.uncertainty)

    def test_p_mismatch(self):
        res, X, _, _ = fitted(seed=4, M=1)
        with pytest.raises(ValidationError):
            classify_pixels(X[:, :-1], res.ensemble)

    def test_needs_training_labels(self):
        res, X, _, _ = fitted(seed=5, M=1)
        res.ensemble.labels = None
        with pytest.raises(ValidationError):
            classify_pixels(X, res.ensemble)

    def test_constrained_training_pixels_keep_label(self):
        res, X, _, _ = fitted(seed=6, M=5)
        with warnings.catch_warnings():
            warnings.simplefilter("error", AlignmentWarning)
            out = classify_pixels(X, res.ensemble)
        mask = res.ensemble.constraints.constrained_mask(X.shape[0])
        agree = (out.votes[:, mask] == res.labels[mask]).mean()
        assert agree >= 0.5
        np.testing.assert_array_equal(out.labels[mask], res.labels[mask])
