import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import binomtest, multivariate_normal

from proxlayers import data


class TestTwoMoon:
    def test_noise_free_points_on_circles(self):
        moons = data.gen_twomoon(200, 0.0, 3)
        for c in (0, 1):
            radius = np.linalg.norm(moons.x[moons.y == c] - data.MOON_CENTERS[c], axis=1)
            assert np.abs(radius - 1.0).max() <= 1e-12

    def test_balance(self):
        moons = data.gen_twomoon(200, 0.08, 1)
        assert np.bincount(moons.y).tolist() == [100, 100]

    def test_one_labeled_point_per_moon_is_leftmost(self):
        moons = data.gen_twomoon(200, 0.08, 2)
        assert moons.y[moons.labeled].tolist() == [0, 1]
        for c, idx in zip((0, 1), moons.labeled):
            assert moons.x[idx, 0] == moons.x[moons.y == c, 0].min()

    def test_deterministic(self):
        a, b = data.gen_twomoon(50, 0.1, 7), data.gen_twomoon(50, 0.1, 7)
        np.testing.assert_array_equal(a.x, b.x)
        np.testing.assert_array_equal(a.labeled, b.labeled)
        assert not np.array_equal(a.x, data.gen_twomoon(50, 0.1, 8).x)

    def test_rejects_small_n(self):
        with pytest.raises(ValueError):
            data.gen_twomoon(9, 0.1, 0)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(10, 300), st.integers(0, 2**32))
    def test_shapes(self, n, seed):
        moons = data.gen_twomoon(n, 0.05, seed)
        assert moons.x.shape == (n, 2)
        assert abs(int(np.sum(moons.y == 0)) - int(np.sum(moons.y == 1))) <= 1


class TestSequences:
    def test_majority_rule_without_corruption(self):
        seqs = data.gen_sequences(300, 15, 3, 0.0, 4)
        np.testing.assert_array_equal(seqs.x.argmax(axis=2), seqs.tokens)
        counts = np.stack([(seqs.tokens == v).sum(axis=1) for v in range(3)], axis=1)
        np.testing.assert_array_equal(counts[np.arange(300), seqs.y], counts.max(axis=1))

    def test_tie_goes_to_first_tied_token(self):
        assert data.majority_label(np.array([[1, 0, 0, 1], [0, 1, 1, 0]]), 2).tolist() == [1, 0]

    def test_label_balance_at_n_1000(self):
        # odd length, two tokens: labels are fair coin flips
        seqs = data.gen_sequences(1000, 30, 2, 0.5, 5)
        ones = int(seqs.y.sum())
        assert abs(ones / 1000 - 0.5) <= 0.05
        assert binomtest(ones, 1000, 0.5).pvalue > 1e-3

    def test_deterministic(self):
        a, b = data.gen_sequences(20, 5, 2, 0.5, 9), data.gen_sequences(20, 5, 2, 0.5, 9)
        np.testing.assert_array_equal(a.x, b.x)

    def test_corruption_level(self):
        seqs = data.gen_sequences(2000, 10, 2, 0.5, 1)
        noise = seqs.x - np.eye(2)[seqs.tokens]
        assert noise.std() == pytest.approx(0.5, rel=0.02)


class TestMultiview:
    def test_noise_free_shared_maps_give_equal_views(self):
        mv = data.gen_synthetic_multiview(50, 4, 6, 0.0, 0.0, 3, 2, shared_maps=True)
        np.testing.assert_array_equal(mv.x, mv.y)

    def test_deterministic(self):
        a = data.gen_synthetic_multiview(30, 4, 5, 1.0, 1.0, 4, 11)
        b = data.gen_synthetic_multiview(30, 4, 5, 1.0, 1.0, 4, 11)
        np.testing.assert_array_equal(a.x, b.x)
        np.testing.assert_array_equal(a.y, b.y)

    def test_bayes_accuracy_from_latent(self):
        # the Bayes rule for equal-prior unit-covariance Gaussians is the
        # nearest class mean
        mv = data.gen_synthetic_multiview(4000, 4, 10, 1.0, 1.0, 4, 3)
        means = 4.0 * np.eye(4)
        scores = np.stack([multivariate_normal(m).logpdf(mv.z) for m in means], axis=1)
        assert np.mean(scores.argmax(axis=1) == mv.labels) >= 0.99

    def test_rejects_latent_smaller_than_classes(self):
        with pytest.raises(ValueError):
            data.gen_synthetic_multiview(10, 2, 4, 1.0, 1.0, 3, 0)
