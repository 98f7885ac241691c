import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sparse_bottleneck.errors import ArgumentError, DomainError, RankError
from sparse_bottleneck.numerics import kmeans, orthonormalize_columns, svd

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


def adjusted_rand(a, b):
    """Adjusted Rand index from the contingency table (independent oracle)."""
    from math import comb

    ca, cb = np.unique(a), np.unique(b)
    table = np.array([[np.sum((a == i) & (b == j)) for j in cb] for i in ca])
    sum_ij = sum(comb(int(v), 2) for v in table.ravel())
    sum_a = sum(comb(int(v), 2) for v in table.sum(1))
    sum_b = sum(comb(int(v), 2) for v in table.sum(0))
    expected = sum_a * sum_b / comb(len(a), 2)
    top = 0.5 * (sum_a + sum_b)
    return (sum_ij - expected) / (top - expected)


class TestSvd:
    def test_identity(self):
        r = svd(np.eye(3))
        np.testing.assert_allclose(r.s, [1, 1, 1])

    def test_diagonal(self):
        r = svd(np.diag([3.0, 2.0]))
        np.testing.assert_allclose(r.s, [3, 2])
        np.testing.assert_allclose(np.abs(r.u), np.eye(2), atol=1e-12)
        np.testing.assert_allclose(np.abs(r.vt), np.eye(2), atol=1e-12)

    def test_random_reconstruction(self):
        m = np.random.default_rng(0).normal(size=(8, 5))
        r = svd(m)
        assert np.linalg.norm(r.reconstruct() - m) < 1e-10
        np.testing.assert_allclose(r.u.T @ r.u, np.eye(5), atol=1e-10)

    def test_sign_convention(self):
        m = np.random.default_rng(1).normal(size=(6, 4))
        for r in (svd(m), svd(-m)):
            idx = np.argmax(np.abs(r.u), axis=0)
            assert np.all(r.u[idx, np.arange(4)] > 0)

    def test_non_finite(self):
        with pytest.raises(DomainError):
            svd(np.array([[1.0, np.nan]]))

    @settings(max_examples=50, deadline=None)
    @given(arrays(float, st.tuples(st.integers(1, 7), st.integers(1, 7)), elements=finite))
    def test_frobenius_identity(self, m):
        r = svd(m)
        fro = np.sum(m * m)
        assert abs(fro - np.sum(r.s ** 2)) <= 1e-8 * max(fro, 1.0)
        assert np.all(np.diff(r.s) <= 1e-12)
        assert np.all(r.s >= 0)


class TestOrthonormalize:
    def test_orthonormal_unchanged(self):
        q, _ = np.linalg.qr(np.random.default_rng(2).normal(size=(6, 3)))
        q = q * np.sign(np.diag(np.linalg.qr(q)[1]))
        np.testing.assert_allclose(orthonormalize_columns(q), q, atol=1e-12)

    def test_projector_preserved(self):
        m = np.array([[1.0, 1.0], [0.0, 1.0]])
        q = orthonormalize_columns(m)
        np.testing.assert_allclose(q.T @ q, np.eye(2), atol=1e-10)
        proj = m @ np.linalg.solve(m.T @ m, m.T)
        np.testing.assert_allclose(q @ q.T, proj, atol=1e-10)

    def test_single_column(self):
        v = np.array([3.0, 4.0])
        np.testing.assert_allclose(orthonormalize_columns(v)[:, 0], v / 5.0)

    def test_rank_deficient(self):
        with pytest.raises(RankError):
            orthonormalize_columns(np.array([[1.0, 2.0], [2.0, 4.0], [3.0, 6.0]]))

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10_000), st.integers(1, 4))
    def test_idempotent(self, seed, k):
        m = np.random.default_rng(seed).normal(size=(6, k))
        once = orthonormalize_columns(m)
        np.testing.assert_allclose(orthonormalize_columns(once), once, atol=1e-12)


class TestKmeans:
    def test_k_equals_n(self):
        y = np.random.default_rng(3).normal(size=(7, 2))
        labels, _, inertia = kmeans(y, 7)
        assert inertia == 0.0
        assert len(set(labels.tolist())) == 7

    def test_two_blobs(self):
        rng = np.random.default_rng(4)
        y = np.vstack([rng.normal(-10, 0.5, (40, 3)), rng.normal(10, 0.5, (40, 3))])
        truth = np.repeat([0, 1], 40)
        labels, _, _ = kmeans(y, 2, seed=0)
        assert adjusted_rand(truth, labels) == pytest.approx(1.0)

    def test_k_too_large(self):
        with pytest.raises(ArgumentError):
            kmeans(np.zeros((3, 2)), 4)

    def test_default_cluster_count(self):
        from sparse_bottleneck.schedule import TrainSchedule

        assert TrainSchedule().k_clusters == 20

    def test_inertia_matches_definition(self):
        y = np.random.default_rng(5).normal(size=(60, 4))
        labels, centers, inertia = kmeans(y, 5, seed=1)
        assert inertia == pytest.approx(np.sum((y - centers[labels]) ** 2))

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000), st.integers(2, 8))
    def test_inertia_non_increasing_and_deterministic(self, seed, k):
        y = np.random.default_rng(seed).normal(size=(40, 3))
        trace = []
        labels, _, _ = kmeans(y, k, seed=seed, trace=trace)
        assert all(b <= a * (1 + 1e-12) + 1e-12 for a, b in zip(trace, trace[1:]))
        again, _, _ = kmeans(y, k, seed=seed)
        np.testing.assert_array_equal(labels, again)

    def test_duplicate_points(self):
        y = np.zeros((10, 2))
        labels, _, inertia = kmeans(y, 3, seed=0)
        assert inertia == 0.0
        assert labels.shape == (10,)
