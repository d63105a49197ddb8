"""Numeric primitives against independent oracles and property tests."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from comet.errors import DataError, SingularError
from comet.numerics import (
    LN2,
    fit_pca,
    jsd,
    jsd_rows,
    project_values,
    rank_diagnostics,
    ridge_solve,
    seeded_rng,
    softmax,
    standardize,
)

finite_vecs = arrays(
    np.float64, st.integers(2, 8),
    elements=st.floats(-50, 50, allow_nan=False, allow_infinity=False),
)


def _simplex(rng, c):
    v = rng.exponential(size=c)
    return v / v.sum()


def ridge_gradient_oracle(Z, s, w, lam, iters=40000, lr=None):
    """Plain gradient descent on the weighted ridge objective."""
    n, d = Z.shape
    if w is None:
        w = np.ones(n)
    theta = np.zeros(d)
    hess_scale = np.linalg.norm(Z.T @ (Z * w[:, None]), 2) + lam
    lr = lr or 1.0 / hess_scale
    for _ in range(iters):
        grad = Z.T @ (w * (Z @ theta - s)) + lam * theta
        theta -= lr * grad
    return theta


class TestSoftmax:
    @given(finite_vecs)
    def test_is_distribution(self, v):
        w = softmax(v)
        assert np.all(w >= 0)
        assert abs(w.sum() - 1.0) < 1e-12

    @given(finite_vecs, st.floats(-100, 100, allow_nan=False))
    def test_shift_invariant(self, v, c):
        assert np.allclose(softmax(v), softmax(v + c), atol=1e-12)

    def test_large_values_stable(self):
        w = softmax(np.array([1e4, 0.0, -1e4]))
        assert np.isfinite(w).all()
        assert w[0] > 0.999


class TestJsd:
    @settings(max_examples=200)
    @given(st.integers(2, 10), st.integers(0, 2**31))
    def test_bounds_and_symmetry(self, c, seed):
        rng = seeded_rng(seed)
        p, q = _simplex(rng, c), _simplex(rng, c)
        v = jsd(p, q)
        assert -1e-12 <= v <= LN2 + 1e-12
        assert abs(v - jsd(q, p)) <= 1e-12

    def test_identity(self):
        p = np.array([0.2, 0.3, 0.5])
        assert jsd(p, p) <= 1e-12

    def test_disjoint_support_hits_bound(self):
        assert abs(jsd(np.array([1.0, 0.0]), np.array([0.0, 1.0])) - LN2) < 1e-12

    def test_rows_matches_scalar(self):
        rng = seeded_rng(0)
        q = _simplex(rng, 5)
        P = np.stack([_simplex(rng, 5) for _ in range(20)])
        rows = jsd_rows(P, q)
        for i in range(20):
            assert abs(rows[i] - jsd(P[i], q)) < 1e-12

    def test_rejects_non_distribution(self):
        with pytest.raises(DataError):
            jsd(np.array([0.5, 0.2]), np.array([0.5, 0.5]))


class TestPca:
    def test_matches_dense_eigensolver_oracle(self):
        rng = seeded_rng(1)
        X = rng.normal(size=(60, 12)) @ rng.normal(size=(12, 12))
        p = fit_pca(X, 12)
        centered = X - X.mean(axis=0)
        oracle = np.sort(np.linalg.eigvalsh(np.cov(centered, rowvar=False, ddof=1)))[::-1]
        assert np.abs(p.eigenvalues - oracle).max() < 1e-6

    def test_orthonormal_components(self):
        rng = seeded_rng(2)
        p = fit_pca(rng.normal(size=(50, 10)), 6)
        gram = p.components.T @ p.components
        assert np.abs(gram - np.eye(6)).max() < 1e-8

    def test_projected_columns_uncorrelated(self):
        rng = seeded_rng(3)
        X = rng.normal(size=(200, 8)) * np.arange(1, 9)
        p = fit_pca(X, 8)
        Z = project_values(p, X)
        corr = np.cov(Z, rowvar=False, ddof=1)
        off = corr - np.diag(np.diag(corr))
        assert np.abs(off).max() < 1e-6

    def test_dimension_cap(self):
        rng = seeded_rng(4)
        p = fit_pca(rng.normal(size=(5, 10)), 100)
        assert p.output_dim == 4  # min(target, d, n-1)

    def test_deterministic_sign(self):
        rng = seeded_rng(5)
        X = rng.normal(size=(40, 6))
        a = fit_pca(X, 3)
        b = fit_pca(X.copy(), 3)
        assert np.array_equal(a.components, b.components)
        anchors = np.abs(a.components).argmax(axis=0)
        assert (a.components[anchors, np.arange(3)] >= 0).all()

    def test_explained_variance_ratio_sums_to_one_at_full_rank(self):
        rng = seeded_rng(6)
        p = fit_pca(rng.normal(size=(50, 5)), 5)
        assert abs(p.explained_variance_ratio.sum() - 1.0) < 1e-9


class TestRidge:
    def test_exact_fit_single_feature(self):
        sol = ridge_solve(np.array([[1.0], [1.0]]), np.array([2.0, 2.0]), lam=0.0)
        assert abs(sol.theta[0] - 2.0) < 1e-12

    def test_infinite_shrinkage_limit(self):
        rng = seeded_rng(7)
        Z = rng.normal(size=(30, 5))
        s = rng.normal(size=30)
        sol = ridge_solve(Z, s, lam=1e12)
        assert np.linalg.norm(sol.theta) <= 1e-6 * np.linalg.norm(Z.T @ s) / 1e6

    @pytest.mark.parametrize("lam", [0.1, 10.0, 1e4])
    def test_matches_gradient_descent_oracle(self, lam):
        rng = seeded_rng(8)
        for trial in range(3):
            Z = rng.normal(size=(50, 8))
            s = rng.normal(size=50)
            w = rng.uniform(0.5, 2.0, size=50)
            sol = ridge_solve(Z, s, w, lam)
            oracle = ridge_gradient_oracle(Z, s, w, lam)
            assert np.abs(sol.theta - oracle).max() < 1e-5

    def test_normal_equation_residual(self):
        rng = seeded_rng(9)
        Z = rng.normal(size=(40, 6))
        s = rng.normal(size=40)
        w = rng.uniform(0.5, 2.0, size=40)
        lam = 3.0
        sol = ridge_solve(Z, s, w, lam)
        lhs = (Z.T @ (Z * w[:, None]) + lam * np.eye(6)) @ sol.theta
        rhs = Z.T @ (w * s)
        scale = np.linalg.norm(rhs)
        assert np.linalg.norm(lhs - rhs) <= 1e-8 * max(scale, 1.0)

    def test_singular_unregularized(self):
        Z = np.zeros((4, 3))
        with pytest.raises(SingularError):
            ridge_solve(Z, np.zeros(4), lam=0.0)

    def test_negative_weight_rejected(self):
        with pytest.raises(DataError):
            ridge_solve(np.ones((2, 1)), np.ones(2), np.array([1.0, -1.0]), 1.0)


class TestStandardize:
    def test_zero_mean_unit_variance(self):
        rng = seeded_rng(10)
        X = rng.normal(loc=5, scale=3, size=(100, 4))
        z, _ = standardize(X)
        assert np.abs(z.mean(axis=0)).max() < 1e-12
        assert np.abs(z.std(axis=0) - 1.0).max() < 1e-12

    def test_constant_column_only_centered(self):
        X = np.column_stack([np.full(10, 7.0), np.arange(10.0)])
        z, _ = standardize(X)
        assert np.abs(z[:, 0]).max() < 1e-12

    def test_stats_reuse(self):
        rng = seeded_rng(11)
        X = rng.normal(size=(50, 3))
        _, stats = standardize(X)
        z2, _ = standardize(X[:10], stats)
        manual = (X[:10] - stats[0]) / stats[1]
        assert np.allclose(z2, manual)


class TestRankDiagnostics:
    def test_isotropic_near_full_rank(self):
        rng = seeded_rng(12)
        d = rank_diagnostics(rng.normal(size=(4000, 64)))
        assert d.normalized_effective_rank >= 0.95
        assert d.explained_variance_assumed

    def test_rank_one_matrix(self):
        u = np.linspace(-1, 1, 50)[:, None]
        d = rank_diagnostics(u @ np.ones((1, 10)))
        assert abs(d.effective_rank - 1.0) < 1e-9

    def test_reference_projection_reports_explained_variance(self):
        rng = seeded_rng(13)
        X = rng.normal(size=(100, 20)) * np.linspace(3, 0.1, 20)
        p = fit_pca(X, 5)
        Z = project_values(p, X)
        d = rank_diagnostics(Z, reference=p)
        assert not d.explained_variance_assumed
        assert 0 < d.explained_variance < 1
        assert abs(d.product - d.explained_variance * d.normalized_effective_rank) < 1e-12
