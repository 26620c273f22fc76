import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from setdist.measures import (
    EmpiricalMeasure,
    GaussianMeasure,
    Tracklet,
    estimate_empirical,
    estimate_gaussian,
    moving_average,
)

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


def point_sets(max_n=12, max_dim=5):
    shape = st.tuples(st.integers(1, max_n), st.integers(1, max_dim))
    return arrays(np.float64, shape, elements=finite)


class TestTracklet:
    def test_fields(self):
        t = Tracklet(np.zeros((3, 2)), identity=4, camera=1, tracklet_id="a")
        assert t.num_frames == 3
        assert t.dim == 2

    @pytest.mark.parametrize("frames", [np.zeros((0, 2)), np.zeros(3), [[np.nan, 0.0]], [[np.inf]]])
    def test_rejects_bad_frames(self, frames):
        with pytest.raises(ValueError):
            Tracklet(frames, 0, 0, "x")

    def test_rejects_negative_labels(self):
        with pytest.raises(ValueError):
            Tracklet(np.zeros((1, 1)), -1, 0, "x")
        with pytest.raises(ValueError):
            Tracklet(np.zeros((1, 1)), 0, -2, "x")


class TestEstimateEmpirical:
    def test_two_points(self):
        m = estimate_empirical([[1, 2], [3, 4]])
        np.testing.assert_array_equal(m.points, [[1, 2], [3, 4]])
        np.testing.assert_array_equal(m.weights, [0.5, 0.5])
        assert m.weights.sum() == 1.0

    def test_singleton(self):
        m = estimate_empirical([[0, 0, 0]])
        assert m.n == 1 and m.dim == 3
        np.testing.assert_array_equal(m.weights, [1.0])

    def test_empty(self):
        with pytest.raises(ValueError, match="empty feature set"):
            estimate_empirical(np.zeros((0, 3)))

    def test_non_finite(self):
        with pytest.raises(ValueError):
            estimate_empirical([[np.nan]])

    @given(point_sets())
    def test_points_round_trip(self, x):
        np.testing.assert_array_equal(estimate_empirical(x).points, x)

    def test_mean(self):
        assert EmpiricalMeasure(np.array([[0.0], [2.0]])).mean()[0] == 1.0


class TestEstimateGaussian:
    def test_two_points(self):
        g = estimate_gaussian([[0, 0], [2, 0]], eps=1e-6)
        np.testing.assert_allclose(g.mean, [1, 0], atol=1e-15)
        np.testing.assert_allclose(g.covariance, [[1 + 1e-6, 0], [0, 1e-6]], atol=1e-15)

    def test_single_point(self):
        g = estimate_gaussian([[3.0, -1.0, 2.0]], eps=1e-6)
        np.testing.assert_array_equal(g.mean, [3, -1, 2])
        np.testing.assert_allclose(g.covariance, 1e-6 * np.eye(3), atol=1e-18)

    def test_repeated_rows(self):
        g = estimate_gaussian(np.tile([[1.5, 2.5]], (7, 1)), eps=1e-4)
        np.testing.assert_allclose(g.covariance, 1e-4 * np.eye(2), atol=1e-15)

    def test_errors(self):
        with pytest.raises(ValueError):
            estimate_gaussian(np.zeros((0, 2)))
        with pytest.raises(ValueError):
            estimate_gaussian([[np.inf, 0.0]])

    @given(point_sets(), st.randoms(use_true_random=False))
    def test_permutation_invariant(self, x, rnd):
        perm = list(range(len(x)))
        rnd.shuffle(perm)
        a, b = estimate_gaussian(x), estimate_gaussian(x[perm])
        scale = 1.0 + np.abs(x).max() ** 2
        np.testing.assert_allclose(a.mean, b.mean, atol=1e-12 * (1 + np.abs(x).max()))
        np.testing.assert_allclose(a.covariance, b.covariance, atol=1e-12 * scale)

    @given(point_sets(max_dim=4))
    def test_eigenvalues_at_least_eps(self, x):
        eps = 1e-6
        g = estimate_gaussian(x, eps)
        scale = 1.0 + np.abs(x).max() ** 2
        assert np.linalg.eigvalsh(g.covariance).min() >= eps - 1e-12 * scale

    def test_gaussian_measure_rejects_asymmetric(self):
        with pytest.raises(ValueError):
            GaussianMeasure(np.zeros(2), np.array([[1.0, 0.5], [0.0, 1.0]]))


class TestMovingAverage:
    def test_window_two(self):
        np.testing.assert_array_equal(moving_average([[0.0], [2.0], [4.0]], 2), [[1.0], [3.0]])

    def test_full_window(self, rng):
        x = rng.normal(size=(3, 4))
        np.testing.assert_allclose(moving_average(x, 3), x.mean(axis=0, keepdims=True), atol=1e-15)

    def test_errors(self):
        with pytest.raises(ValueError, match="window exceeds sequence length"):
            moving_average(np.zeros((2, 1)), 3)
        with pytest.raises(ValueError):
            moving_average(np.zeros((2, 1)), 0)

    @given(point_sets())
    def test_k1_is_identity(self, x):
        out = moving_average(x, 1)
        assert out.tobytes() == x.tobytes()

    @given(point_sets(), st.integers(1, 12))
    def test_convex_hull_bounds(self, x, k):
        k = min(k, len(x))
        out = moving_average(x, k)
        assert out.shape == (len(x) - k + 1, x.shape[1])
        slack = 1e-12 * (1 + np.abs(x).max())
        assert np.all(out >= x.min(axis=0) - slack)
        assert np.all(out <= x.max(axis=0) + slack)
