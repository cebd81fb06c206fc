"""Wasserstein importance, precision estimation, and the weighted metric."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dpmdce.distributions import FittedDistribution
from dpmdce.featstat import StatsFile, selection_from_pass_rates
from dpmdce.fusion import FusionConfig
from dpmdce.importance import (
    DpmdMetric,
    ImportanceVector,
    build_importance,
    dpmd_distance,
    dpmd_gradient,
    estimate_precision,
    wasserstein_1d,
)


def normal(mu, sigma):
    return FittedDistribution("normal", [mu, sigma])


def point(v):
    return FittedDistribution("degenerate_point", [v])


class TestWasserstein:
    def test_two_point_masses_exact(self):
        assert wasserstein_1d(point(1.5), point(-2.0)) == 3.5
        assert wasserstein_1d(point(0.3), point(0.3)) == 0.0

    def test_shifted_normals(self):
        assert abs(wasserstein_1d(normal(0, 1), normal(2, 1)) - 2.0) < 1e-3

    def test_scaled_normals(self):
        # same mean, sigma 1 vs 2: the quantile gap integrates to E|Z|
        w = wasserstein_1d(normal(0, 1), normal(0, 2))
        assert abs(w - np.sqrt(2.0 / np.pi)) < 1e-3

    def test_exponential_scales(self):
        a = FittedDistribution("exponential", [0.0, 1.0])
        b = FittedDistribution("exponential", [0.0, 2.0])
        assert abs(wasserstein_1d(a, b) - 1.0) < 1e-3

    def test_point_vs_normal(self):
        # W1(delta_0, N(0,1)) = E|Z|
        w = wasserstein_1d(point(0.0), normal(0, 1))
        assert abs(w - np.sqrt(2.0 / np.pi)) < 1e-3

    def test_symmetry(self):
        a, b = normal(0.5, 1.2), FittedDistribution("exponential", [0.0, 0.7])
        assert wasserstein_1d(a, b) == wasserstein_1d(b, a)

    def test_order_validation(self):
        with pytest.raises(ValueError):
            wasserstein_1d(normal(0, 1), normal(1, 1), order=0.5)

    def test_order_two(self):
        # W2 between N(0,1) and N(2,1) is the mean shift
        w2 = wasserstein_1d(normal(0, 1), normal(2, 1), order=2.0)
        assert abs(w2 - 2.0) < 1e-3

    @given(
        st.floats(-3, 3), st.floats(0.1, 3), st.floats(-3, 3), st.floats(0.1, 3)
    )
    @settings(max_examples=30, deadline=None)
    def test_nonnegative_and_lower_bounded_by_mean_gap(self, m1, s1, m2, s2):
        w = wasserstein_1d(normal(m1, s1), normal(m2, s2))
        assert w >= 0.0
        # W1 >= |E P - E Q| always; slack covers the quadrature's tail cut
        assert w >= abs(m1 - m2) - 1e-3


class TestImportanceVector:
    def test_validation(self):
        with pytest.raises(ValueError):
            ImportanceVector(0, 1, np.zeros((2, 2)), FusionConfig())
        with pytest.raises(ValueError):
            ImportanceVector(0, 1, np.array([1.0, -0.1]), FusionConfig())
        with pytest.raises(ValueError):
            ImportanceVector(0, 1, np.array([np.inf]), FusionConfig())

    def test_normalized_unit_mean(self):
        iv = ImportanceVector(0, 1, np.array([1.0, 3.0]), FusionConfig())
        lam = iv.normalized()
        assert np.isclose(lam.mean(), 1.0)
        assert np.allclose(lam, [0.5, 1.5])

    def test_zero_vector_normalizes_to_zeros(self):
        iv = ImportanceVector(0, 1, np.zeros(3), FusionConfig())
        assert np.array_equal(iv.normalized(), np.zeros(3))

    def test_len(self):
        assert len(ImportanceVector(0, 1, np.zeros(5), FusionConfig())) == 5


def toy_stats():
    """Two fitted layers (3 and 4), widths 4 and 2, with hand-set point masses."""
    stats = StatsFile(depth=4)
    stats.layer_widths = {3: 4, 4: 2}
    stats.class_counts = {0: 10, 1: 10}
    stats.fits = {
        3: {
            0: [point(0.0), point(0.0), point(2.0), point(2.0)],
            1: [point(1.0), point(1.0), point(0.0), point(0.0)],
        },
        4: {
            0: [point(0.0), point(4.0)],
            1: [point(2.0), point(4.0)],
        },
    }
    stats.selection = selection_from_pass_rates([0.9, 0.9], depth=4, alpha=0.5)
    assert stats.selection.selected_layers == [3, 4]
    return stats


class TestBuildImportance:
    def test_hand_computed_fusion(self):
        # layer 1 per-neuron W1: [1,1,2,2] -> pooled to width 2: [1,2]
        # layer 2 per-neuron W1: [2,0]
        # balanced merge: ([1,2] + [2,0]) / 2 = [1.5, 1.0]
        iv = build_importance(0, 1, toy_stats())
        assert np.allclose(iv.values, [1.5, 1.0])
        assert iv.skipped_pairs == 0

    def test_weighted_fusion(self):
        # base 2: earlier layer carries weight 2: (2*[1,2] + [2,0]) / 2
        iv = build_importance(0, 1, toy_stats(), fusion=FusionConfig(2.0))
        assert np.allclose(iv.values, [2.0, 2.0])

    def test_missing_class_zeroes_layer(self):
        stats = toy_stats()
        del stats.fits[3][1]
        iv = build_importance(0, 1, stats)
        assert iv.skipped_pairs == 1
        # only the last layer contributes: [2,0] / 2
        assert np.allclose(iv.values, [1.0, 0.0])

    def test_no_selection_rejected(self):
        stats = toy_stats()
        stats.selection = None
        with pytest.raises(ValueError):
            build_importance(0, 1, stats)

    def test_on_trained_stats(self, tiny_stats):
        classes = tiny_stats.classes()
        iv = build_importance(classes[0], classes[1], tiny_stats)
        assert len(iv) == 64
        assert (iv.values >= 0).all()
        assert iv.values.max() > 0  # trained classes differ somewhere


class TestEstimatePrecision:
    def test_exact_small_case(self):
        feats = np.array([[0.0, 0.0], [2.0, 0.0], [0.0, 2.0], [2.0, 2.0]])
        ridge = 1e-3
        prec = estimate_precision(feats, ridge=ridge)
        # sample covariance is (4/3) I
        expect = np.eye(2) / (4.0 / 3.0 + ridge)
        assert np.allclose(prec, expect)

    def test_covariance_variant(self):
        feats = np.array([[0.0, 0.0], [2.0, 0.0], [0.0, 2.0], [2.0, 2.0]])
        cov = estimate_precision(feats, ridge=1e-3, invert=False)
        assert np.allclose(cov, (4.0 / 3.0 + 1e-3) * np.eye(2))

    def test_symmetric_output(self):
        rng = np.random.default_rng(0)
        feats = rng.normal(size=(200, 8)) @ rng.normal(size=(8, 8))
        prec = estimate_precision(feats)
        assert np.array_equal(prec, prec.T)

    def test_recovers_inverse_covariance(self):
        rng = np.random.default_rng(1)
        feats = rng.normal(size=(20000, 2)) * np.array([2.0, 0.5])
        prec = estimate_precision(feats, ridge=1e-6)
        assert np.allclose(prec, np.diag([1 / 4.0, 1 / 0.25]), rtol=0.1, atol=0.05)

    def test_input_validation(self):
        with pytest.raises(ValueError):
            estimate_precision(np.zeros(5))
        bad = np.zeros((4, 2))
        bad[0, 0] = np.nan
        with pytest.raises(ValueError):
            estimate_precision(bad)


class TestDpmdMetric:
    def test_effective_matrix(self):
        m = DpmdMetric(np.eye(2) * 2, beta=3.0, importance=np.array([1.0, 0.5]))
        assert np.allclose(m.effective, np.diag([5.0, 3.5]))

    def test_euclidean_factory(self):
        m = DpmdMetric.euclidean(3)
        x, c = np.array([1.0, 2.0, 3.0]), np.zeros(3)
        assert np.isclose(dpmd_distance(x, c, m), np.linalg.norm(x))

    def test_validation(self):
        with pytest.raises(ValueError):
            DpmdMetric(np.array([[1.0, 0.5], [0.0, 1.0]]))  # not symmetric
        with pytest.raises(ValueError):
            DpmdMetric(np.eye(2), beta=-1.0)
        with pytest.raises(ValueError):
            DpmdMetric(np.eye(2), importance=np.array([1.0, -1.0]))
        with pytest.raises(ValueError):
            DpmdMetric(np.eye(2), importance=np.ones(3))
        with pytest.raises(ValueError):
            DpmdMetric(np.zeros((2, 3)))

    def test_none_importance_is_zero_boost(self):
        m = DpmdMetric(np.eye(2), beta=5.0, importance=None)
        assert np.allclose(m.effective, np.eye(2))


class TestDpmdDistance:
    def test_hand_case(self):
        m = DpmdMetric(np.array([[2.0, 1.0], [1.0, 2.0]]), beta=3.0,
                       importance=np.array([1.0, 0.0]))
        # effective [[5,1],[1,2]]; d=[1,1] -> sqrt(5+1+1+2)=3
        assert np.isclose(dpmd_distance([1.0, 1.0], [0.0, 0.0], m), 3.0)

    def test_mahalanobis_reduction(self):
        rng = np.random.default_rng(2)
        a = rng.normal(size=(4, 4))
        mat = a @ a.T + 0.1 * np.eye(4)
        m = DpmdMetric(mat, beta=0.0)
        x, c = rng.normal(size=4), rng.normal(size=4)
        d = x - c
        assert np.isclose(dpmd_distance(x, c, m), np.sqrt(d @ mat @ d), rtol=1e-12)

    def test_symmetry_in_arguments(self):
        m = DpmdMetric(np.eye(3), beta=1.0, importance=np.array([1.0, 2.0, 0.0]))
        x, c = np.array([1.0, -1.0, 2.0]), np.array([0.0, 3.0, 1.0])
        assert dpmd_distance(x, c, m) == dpmd_distance(c, x, m)

    def test_shape_guard(self):
        m = DpmdMetric.euclidean(3)
        with pytest.raises(ValueError):
            dpmd_distance(np.zeros(2), np.zeros(3), m)

    def test_gradient_finite_difference(self):
        rng = np.random.default_rng(3)
        a = rng.normal(size=(3, 3))
        m = DpmdMetric(a @ a.T + 0.1 * np.eye(3), beta=0.5,
                       importance=np.abs(rng.normal(size=3)))
        x, c = rng.normal(size=3), rng.normal(size=3)
        g = dpmd_gradient(x, c, m)
        h = 1e-6
        for j in range(3):
            xp, xm = x.copy(), x.copy()
            xp[j] += h
            xm[j] -= h
            fd = (dpmd_distance(xp, c, m) - dpmd_distance(xm, c, m)) / (2 * h)
            assert abs(g[j] - fd) < 1e-6

    def test_gradient_zero_at_center(self):
        m = DpmdMetric.euclidean(3)
        assert np.array_equal(dpmd_gradient(np.ones(3), np.ones(3), m), np.zeros(3))

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=30, deadline=None)
    def test_triangle_inequality(self, seed):
        rng = np.random.default_rng(seed)
        a = rng.normal(size=(3, 3))
        m = DpmdMetric(a @ a.T + 0.05 * np.eye(3), beta=float(rng.uniform(0, 2)),
                       importance=np.abs(rng.normal(size=3)))
        x, y, z = rng.normal(size=(3, 3))
        assert dpmd_distance(x, z, m) <= dpmd_distance(x, y, m) + dpmd_distance(y, z, m) + 1e-10
