import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.optimize import minimize
from scipy.special import expit

from proxlayers import catalog, dropout as dp
from proxlayers.errors import ConvergenceError


def full_objective_operator(x, lam):
    """The prox objective written directly in c, with the gradient through p."""
    x2 = x**2

    def reg(c):
        p = expit(x @ c)
        return float(p * (1 - p) * np.sum(x2 * c**2))

    def grad(c):
        p = expit(x @ c)
        v = p * (1 - p)
        return 2 * v * x2 * c + v * (1 - 2 * p) * np.sum(x2 * c**2) * x

    return catalog.ProxOperator(
        reg, grad, catalog.Unconstrained(), lam=lam, regularizer_convex=False
    )


class TestAlpha:
    def test_matches_stated_form(self):
        s = np.linspace(-30, 30, 121)
        np.testing.assert_allclose(dp.alpha_s(s), 2 / (2 + np.exp(s) + np.exp(-s)), rtol=1e-12)

    def test_peak_at_zero(self):
        assert dp.alpha_s(0.0) == 0.5


class TestMultiplier:
    @pytest.mark.parametrize("s", [-7.0, -0.3, 0.0, 1.2, 25.0])
    def test_bisection_matches_closed_form(self, s):
        x = np.array([0.4, -1.3, 2.0])
        mu = dp.solve_mu(x, s, 0.5)
        assert abs(dp.solve_mu_bisect(x, s, 0.5) - mu) <= 1e-9 * max(1.0, abs(mu))

    def test_constraint_met(self):
        x = np.array([1.0, -2.0, 0.5, 0.0])
        s, lam = 0.8, 0.3
        mu = dp.solve_mu(x, s, lam)
        c = (lam + mu) * x / (lam + dp.alpha_s(s) * x**2)
        assert abs(x @ c - s) <= 1e-12

    def test_residual_strictly_increasing(self):
        x = np.array([0.7, -0.2, 1.5])
        s, lam = 0.4, 0.5
        a = dp.alpha_s(s)
        mus = np.linspace(-3, 3, 50)
        resid = [x @ ((lam + m) * x / (lam + a * x**2)) - s for m in mus]
        assert np.all(np.diff(resid) > 0)


class TestProxDropout:
    def test_zero_input(self):
        c, s, _ = dp.prox_dropout(np.zeros(3))
        np.testing.assert_array_equal(c, 0.0)
        assert s == 0.0

    def test_large_lambda_is_identity(self):
        x = np.array([0.5, -1.0, 2.0])
        c, _, _ = dp.prox_dropout(x, dp.DropoutProxConfig(lam=1e6))
        np.testing.assert_allclose(c, x, atol=1e-4)

    def test_returned_s_is_consistent(self):
        x = np.array([1.5, -0.4, 0.9])
        c, s, mu = dp.prox_dropout(x)
        assert abs(x @ c - s) <= 1e-12
        assert abs(dp.solve_mu(x, s, 0.5) - mu) <= 1e-12

    @pytest.mark.parametrize("seed", range(5))
    def test_against_direct_minimization(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.uniform(-2, 2, size=3)
        lam = [0.1, 0.5, 2.0][seed % 3]
        c, _, _ = dp.prox_dropout(x, dp.DropoutProxConfig(lam=lam))
        op = full_objective_operator(x, lam)
        # multiple starts, keep the best local minimum
        starts = [x, np.zeros(3), -x, rng.normal(size=3)]
        best = min(
            (catalog.prox_numeric(op, x, z0=z0) for z0 in starts),
            key=lambda z: dp.dropout_objective(z, x, lam),
        )
        np.testing.assert_allclose(c, best, atol=1e-4)
        assert dp.dropout_objective(c, x, lam) <= dp.dropout_objective(best, x, lam) + 1e-10

    def test_bookkeeping_identity(self):
        rng = np.random.default_rng(11)
        for _ in range(20):
            x = rng.normal(size=4)
            beta = rng.normal(size=4)
            c, s, mu = dp.prox_dropout(x)
            h = dp.shape_coordinates(beta, x, s, mu, 0.5)
            assert abs(h @ c - beta @ x) <= 1e-10 * max(1.0, np.abs(beta @ x))

    def test_wide_input_uses_wider_interval(self):
        # |x^T c| can reach 2 ||x||^2 = 32 here, outside the default [-10, 10]
        x = np.array([4.0, 0.0])
        c, s, _ = dp.prox_dropout(x, dp.DropoutProxConfig(lam=2.0))
        op = full_objective_operator(x, 2.0)
        ref = catalog.prox_numeric(op, x)
        assert dp.dropout_objective(c, x, 2.0) <= dp.dropout_objective(ref, x, 2.0) + 1e-10

    def test_batch_rows(self):
        xs = np.array([[0.5, 1.0], [0.0, 0.0], [-1.0, 2.0]])
        out = dp.prox_dropout_batch(xs)
        for row, expected in zip(xs, out):
            np.testing.assert_array_equal(dp.prox_dropout(row)[0], expected)

    def test_config_rejects_coarse_tolerance(self):
        with pytest.raises(ValueError):
            dp.DropoutProxConfig(s_tol=1e-2)

    @settings(max_examples=40, deadline=None)
    @given(
        arrays(np.float64, 3, elements=st.floats(-3, 3)),
        st.sampled_from([0.1, 0.5, 1.0, 4.0]),
    )
    def test_beats_identity_and_zero(self, x, lam):
        c, _, _ = dp.prox_dropout(x, dp.DropoutProxConfig(lam=lam))
        f = dp.dropout_objective(c, x, lam)
        assert f <= dp.dropout_objective(x, x, lam) + 1e-12
        assert f <= dp.dropout_objective(np.zeros(3), x, lam) + 1e-12


def logistic_reference(x, y, c_reg=0.0):
    def f(w):
        return np.mean(np.logaddexp(0, -y * (x @ w))) + c_reg * w @ w

    return minimize(f, np.zeros(x.shape[1]), method="BFGS", options={"gtol": 1e-10}).x


@pytest.fixture
def overlapping():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(60, 2))
    y = np.where(x @ [1.0, -0.5] + 0.8 * rng.normal(size=60) > 0, 1.0, -1.0)
    return x, y


class TestRrmDropout:
    def test_two_separable_points(self):
        x = np.array([[1.0, 0.2], [-0.5, 1.0]])
        y = np.array([1.0, -1.0])
        beta = dp.rrm_dropout_train(x, y, 0.1)
        np.testing.assert_array_equal(np.sign(x @ beta), y)

    def test_zero_mu_is_logistic_regression(self, overlapping):
        x, y = overlapping
        np.testing.assert_allclose(dp.rrm_dropout_train(x, y, 0.0), logistic_reference(x, y), atol=1e-4)

    def test_mirrored_data_aligns_with_x(self):
        # the penalty is coordinate-wise, so alignment needs |u_1| = |u_2|;
        # one disagreeing label per side keeps the minimizer finite
        u = np.array([0.7, -0.7])
        x = np.vstack([u, u, u, -u, -u, -u])
        y = np.array([1.0, 1.0, -1.0, -1.0, -1.0, 1.0])
        beta = dp.rrm_dropout_train(x, y, 0.2)
        cos = beta @ u / (np.linalg.norm(beta) * np.linalg.norm(u))
        assert abs(abs(cos) - 1) <= 1e-8

    def test_gradient_vanishes(self, overlapping):
        x, y = overlapping
        beta = dp.rrm_dropout_train(x, y, 0.3)
        h = 1e-6
        g = [
            (dp.rrm_objective(beta + h * e, x, y, 0.3) - dp.rrm_objective(beta - h * e, x, y, 0.3)) / (2 * h)
            for e in np.eye(2)
        ]
        assert np.linalg.norm(g) <= 1e-5

    def test_penalty_shrinks(self, overlapping):
        x, y = overlapping
        assert np.linalg.norm(dp.rrm_dropout_train(x, y, 1.0)) < np.linalg.norm(
            dp.rrm_dropout_train(x, y, 0.0)
        )

    def test_labels_checked(self):
        with pytest.raises(ValueError):
            dp.rrm_dropout_train(np.eye(2), np.array([0.0, 1.0]), 0.1)

    def test_iteration_cap(self, overlapping):
        x, y = overlapping
        with pytest.raises(ConvergenceError):
            dp.rrm_dropout_train(x, y, 0.1, max_iter=2)


class TestPipeline:
    def test_huge_ridge_gives_zero(self, overlapping):
        x, y = overlapping
        alpha, _ = dp.prox_pipeline_train(x, y, dp.DropoutProxConfig(), 1e8)
        assert np.abs(alpha).max() <= 1e-8

    def test_identity_prox_matches_ridge_logistic(self, overlapping):
        x, y = overlapping
        alpha, out = dp.prox_pipeline_train(x, y, dp.DropoutProxConfig(lam=1e9), 0.05)
        np.testing.assert_allclose(out, x, atol=1e-6)
        np.testing.assert_allclose(alpha, logistic_reference(x, y, 0.05), atol=1e-4)

    def test_two_separable_points(self):
        x = np.array([[1.0, 0.2], [-0.5, 1.0]])
        y = np.array([1.0, -1.0])
        alpha, out = dp.prox_pipeline_train(x, y, dp.DropoutProxConfig(), 0.01)
        np.testing.assert_array_equal(np.sign(out @ alpha), y)


class TestCompare:
    def test_identical(self):
        x = np.random.default_rng(0).normal(size=(10, 2))
        beta = np.array([1.0, 2.0])
        _, r = dp.compare_discriminants(x, beta, beta, outputs=x)
        assert r == pytest.approx(1.0, abs=1e-12)

    def test_anti(self):
        x = np.random.default_rng(1).normal(size=(10, 2))
        beta = np.array([1.0, 2.0])
        _, r = dp.compare_discriminants(x, beta, -beta, outputs=x)
        assert r == pytest.approx(-1.0, abs=1e-12)

    def test_zero_variance_rejected(self):
        x = np.ones((5, 2))
        with pytest.raises(ValueError):
            dp.compare_discriminants(x, np.ones(2), np.ones(2), outputs=x)

    def test_pairs_shape(self):
        x = np.random.default_rng(2).normal(size=(7, 3))
        pairs, _ = dp.compare_discriminants(x, np.ones(3), np.ones(3), dp.DropoutProxConfig())
        assert pairs.shape == (7, 2)
