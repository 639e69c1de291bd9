import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from proxlayers import linalg
from proxlayers.errors import NotPositiveDefiniteError, NotSymmetricError, ShapeError

METHODS = ["lapack", "jacobi"]


def _svd_residuals(a, res):
    r = len(res.sigma)
    orth_u = np.abs(res.u.T @ res.u - np.eye(r)).max()
    orth_v = np.abs(res.vt @ res.vt.T - np.eye(r)).max()
    recon = np.abs((res.u * res.sigma) @ res.vt - a).max()
    return orth_u, orth_v, recon


class TestSvd:
    @pytest.mark.parametrize("method", METHODS)
    def test_identity(self, method):
        res = linalg.svd(np.eye(3), method=method)
        np.testing.assert_allclose(res.sigma, [1, 1, 1], atol=1e-14)

    @pytest.mark.parametrize("method", METHODS)
    def test_diagonal(self, method):
        res = linalg.svd(np.diag([3.0, 2.0]), method=method)
        np.testing.assert_allclose(res.sigma, [3, 2], atol=1e-14)
        np.testing.assert_allclose(np.abs(res.u), np.eye(2), atol=1e-14)
        np.testing.assert_allclose(np.abs(res.vt), np.eye(2), atol=1e-14)

    @pytest.mark.parametrize("method", METHODS)
    def test_random_reconstruction(self, method):
        a = np.random.default_rng(5).normal(size=(5, 4))
        res = linalg.svd(a, method=method)
        assert res.u.shape == (5, 4) and res.vt.shape == (4, 4)
        assert np.all(np.diff(res.sigma) <= 0)
        orth_u, orth_v, recon = _svd_residuals(a, res)
        assert recon <= 1e-8
        assert orth_u <= 1e-10 and orth_v <= 1e-10

    @pytest.mark.parametrize("method", METHODS)
    def test_wide_and_rank_deficient(self, method):
        rng = np.random.default_rng(1)
        a = rng.normal(size=(3, 7))
        a[2] = a[0] - a[1]
        res = linalg.svd(a, method=method)
        assert res.sigma[-1] < 1e-12
        orth_u, orth_v, recon = _svd_residuals(a, res)
        assert max(orth_u, orth_v) <= 1e-10 and recon <= 1e-8

    def test_jacobi_matches_lapack_singular_values(self):
        a = np.random.default_rng(2).normal(size=(9, 6))
        np.testing.assert_allclose(
            linalg.svd(a, "jacobi").sigma, linalg.svd(a).sigma, rtol=1e-12
        )

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError):
            linalg.svd(np.array([[1.0, np.nan]]))

    def test_stable_tie_order(self):
        res = linalg.svd(np.eye(4) * 2.0)
        np.testing.assert_allclose(res.sigma, 2.0)

    @pytest.mark.parametrize("method", METHODS)
    def test_bulk_random(self, method):
        # 1000 matrices up to 16x16 for lapack; jacobi is O(n^3) python loops
        count = 1000 if method == "lapack" else 150
        rng = np.random.default_rng(11)
        for _ in range(count):
            m, n = rng.integers(1, 17, size=2)
            a = rng.normal(size=(m, n)) * rng.uniform(0.1, 10)
            res = linalg.svd(a, method=method)
            orth_u, orth_v, recon = _svd_residuals(a, res)
            assert orth_u <= 1e-10 and orth_v <= 1e-10
            assert recon <= 1e-8 * max(1.0, np.abs(a).max())


class TestSymEig:
    @pytest.mark.parametrize("method", METHODS)
    def test_diag(self, method):
        w, _ = linalg.sym_eig(np.diag([1.0, 2.0]), method=method)
        np.testing.assert_allclose(w, [2, 1], atol=1e-14)

    @pytest.mark.parametrize("method", METHODS)
    def test_swap(self, method):
        w, _ = linalg.sym_eig(np.array([[0.0, 1.0], [1.0, 0.0]]), method=method)
        np.testing.assert_allclose(w, [1, -1], atol=1e-14)

    @pytest.mark.parametrize("method", METHODS)
    def test_residual(self, method):
        b = np.random.default_rng(3).normal(size=(6, 6))
        a = b + b.T
        w, v = linalg.sym_eig(a, method=method)
        assert np.all(np.diff(w) <= 0)
        assert np.abs(a @ v - v * w).max() <= 1e-8

    def test_asymmetric_rejected(self):
        with pytest.raises(NotSymmetricError):
            linalg.sym_eig(np.array([[0.0, 1.0], [0.0, 0.0]]))


class TestInvSqrtPsd:
    def test_identity_with_zero_eps(self):
        np.testing.assert_allclose(linalg.inv_sqrt_psd(np.eye(3), 0.0), np.eye(3), atol=1e-10)

    def test_forced_diagonal(self):
        b = linalg.inv_sqrt_psd(np.diag([3.0, 0.0]), 1.0)
        np.testing.assert_allclose(b, np.diag([0.5, 1.0]), atol=1e-14)

    def test_gram_identity_residual(self):
        x = np.random.default_rng(4).normal(size=(5, 8))
        a = x @ x.T
        b = linalg.inv_sqrt_psd(a, 1e-3)
        assert np.abs(b - b.T).max() == 0.0
        assert np.abs(b @ (a + 1e-3 * np.eye(5)) @ b - np.eye(5)).max() <= 1e-8

    def test_commutes_with_input(self):
        x = np.random.default_rng(6).normal(size=(4, 3))
        a = x @ x.T  # rank deficient, numerically indefinite
        b = linalg.inv_sqrt_psd(a, 0.5)
        assert np.abs(a @ b - b @ a).max() <= 1e-8

    def test_negative_rejected(self):
        with pytest.raises(NotPositiveDefiniteError):
            linalg.inv_sqrt_psd(np.diag([1.0, -1e-3]), 1.0)

    def test_negative_eps_rejected(self):
        with pytest.raises(ValueError):
            linalg.inv_sqrt_psd(np.eye(2), -1.0)


class TestCenterColumns:
    def test_small(self):
        np.testing.assert_array_equal(linalg.center_columns([[1.0, 3.0]]), [[-1.0, 1.0]])

    def test_single_column(self):
        np.testing.assert_array_equal(linalg.center_columns([[2.0], [5.0]]), [[0.0], [0.0]])

    def test_random_rows_sum_to_zero(self):
        a = np.random.default_rng(7).normal(size=(4, 7))
        assert np.abs(linalg.center_columns(a).sum(axis=1)).max() <= 1e-12

    def test_empty_rejected(self):
        with pytest.raises(ShapeError):
            linalg.center_columns(np.zeros((2, 0)))


class TestSolveSpd:
    def test_identity(self):
        b = np.arange(6.0).reshape(3, 2)
        np.testing.assert_array_equal(linalg.solve_spd(np.eye(3), b), b)

    def test_scaled(self):
        np.testing.assert_allclose(linalg.solve_spd(2 * np.eye(4), np.ones(4)), 0.5)

    def test_random_residual(self):
        rng = np.random.default_rng(8)
        g = rng.normal(size=(6, 6))
        a = g @ g.T + 0.1 * np.eye(6)
        b = rng.normal(size=(6, 2))
        x = linalg.solve_spd(a, b)
        assert np.abs(a @ x - b).max() <= 1e-8 * max(1.0, np.abs(b).max())

    def test_not_pd(self):
        with pytest.raises(NotPositiveDefiniteError):
            linalg.solve_spd(np.diag([1.0, -1.0]), np.ones(2))


@settings(max_examples=60, deadline=None)
@given(
    n=st.integers(1, 8),
    seed=st.integers(0, 2**32 - 1),
    eps=st.floats(1e-6, 10.0),
)
def test_inv_sqrt_and_solve_roundtrip(n, seed, eps):
    rng = np.random.default_rng(seed)
    x = rng.uniform(-2, 2, size=(n, n + 2))
    a = x @ x.T
    b = linalg.inv_sqrt_psd(a, eps)
    shifted = a + eps * np.eye(n)
    assert np.abs(a @ b - b @ a).max() <= 1e-8 * max(1.0, np.abs(a).max())
    rhs = rng.normal(size=n)
    sol = linalg.solve_spd(shifted, rhs)
    assert np.abs(shifted @ sol - rhs).max() <= 1e-8 * max(1.0, np.abs(rhs).max())
