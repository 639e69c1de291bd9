import numpy as np
import pytest

from proxlayers import catalog, kernel_warp as kw
from proxlayers.rng import make_rng


@pytest.fixture
def cloud():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(40, 2))
    nmap = kw.NystromMap.from_data(x, 15, rng)
    return x, nmap


class TestNystrom:
    def test_single_landmark_is_one(self):
        nmap = kw.NystromMap.fit([[0.3, -0.2]], gamma=0.7)
        np.testing.assert_allclose(kw.nystrom_embed(nmap, np.array([0.3, -0.2])), [1.0], atol=1e-8)

    def test_reproduces_kernel_on_landmarks(self, cloud):
        _, nmap = cloud
        phi = kw.nystrom_embed(nmap, nmap.landmarks)
        k_w = kw.gaussian_kernel(nmap.landmarks, nmap.landmarks, nmap.gamma)
        assert np.abs(phi @ phi.T - k_w).max() <= 1e-6

    def test_inverse_sqrt_with_jitter(self, cloud):
        _, nmap = cloud
        k_w = kw.gaussian_kernel(nmap.landmarks, nmap.landmarks, nmap.gamma)
        b = nmap.k_w_inv_sqrt
        assert np.abs(b @ (k_w + kw.NYSTROM_JITTER * np.eye(nmap.p)) @ b - np.eye(nmap.p)).max() <= 1e-6

    def test_inverse_sqrt_well_conditioned(self):
        # the jitter shifts B K_W B away from I by about jitter / lambda_min(K_W),
        # so the bare identity needs landmarks that are well separated
        g = np.arange(4.0)
        w = np.array([[a, b] for a in g for b in g])
        nmap = kw.NystromMap.fit(w, gamma=1.0)
        k_w = kw.gaussian_kernel(w, w, 1.0)
        b = nmap.k_w_inv_sqrt
        assert np.abs(b @ k_w @ b - np.eye(16)).max() <= 1e-6

    def test_zero_bandwidth_rejected(self):
        with pytest.raises(ValueError):
            kw.NystromMap.fit(np.eye(2), gamma=0.0)

    def test_median_bandwidth(self):
        # squared distances 1, 4, 1: median 1
        assert kw.median_bandwidth([[0.0], [1.0], [2.0]]) == 1.0

    def test_duplicate_landmarks_survive_jitter(self):
        nmap = kw.NystromMap.fit([[0.0, 0.0], [0.0, 0.0], [1.0, 0.0]], gamma=1.0)
        assert np.all(np.isfinite(nmap.k_w_inv_sqrt))


class TestGradientRepresenters:
    def test_shape_single_anchor(self, cloud):
        _, nmap = cloud
        assert kw.gradient_representers(nmap, np.array([0.1, 0.2])).shape == (nmap.p, 2)

    def test_zero_derivative_at_landmark(self):
        nmap = kw.NystromMap.fit([[0.5, -1.0]], gamma=2.0)
        np.testing.assert_array_equal(kw.gradient_representers(nmap, [[0.5, -1.0]]), [[0.0, 0.0]])

    def test_inner_product_is_partial_derivative(self, cloud):
        # <z~_ij, phi~(x)> approximates d/dx_ij k(x_i, x); at landmarks the
        # Nystrom inner product is exact, so compare there against central FD
        x, nmap = cloud
        anchors = x[:3]
        z = kw.gradient_representers(nmap, anchors)
        phi = kw.nystrom_embed(nmap, nmap.landmarks)
        h = 1e-5
        for i, a in enumerate(anchors):
            for j in range(2):
                e = np.zeros(2)
                e[j] = h
                fd = (
                    kw.gaussian_kernel(a + e, nmap.landmarks, nmap.gamma)
                    - kw.gaussian_kernel(a - e, nmap.landmarks, nmap.gamma)
                )[0] / (2 * h)
                assert np.abs(phi @ z[:, i * 2 + j] - fd).max() <= 1e-4


class TestLaplacianRepresenters:
    def test_equal_points_give_zero_column(self, cloud):
        _, nmap = cloud
        z = kw.laplacian_representers(nmap, [(0, 1, 2.0)], np.array([[0.3, 0.3], [0.3, 0.3]]))
        np.testing.assert_array_equal(z, 0.0)

    def test_zero_weight_column(self, cloud):
        x, nmap = cloud
        np.testing.assert_array_equal(kw.laplacian_representers(nmap, [(0, 1, 0.0)], x), 0.0)

    def test_negative_weight_rejected(self, cloud):
        x, nmap = cloud
        with pytest.raises(ValueError):
            kw.laplacian_representers(nmap, [(0, 1, -1.0)], x)

    def test_path_graph_penalty_two_ways(self, cloud):
        _, nmap = cloud
        pts = np.array([[0.0, 0.0], [0.5, 0.1], [1.0, -0.3]])
        edges = [(0, 1, 1.0), (1, 2, 0.5)]
        z = kw.laplacian_representers(nmap, edges, pts)
        v = np.random.default_rng(1).normal(size=nmap.p)
        values = kw.nystrom_embed(nmap, pts) @ v  # f(x) = <v, phi~(x)>
        assert abs(np.sum((z.T @ v) ** 2) - kw.laplacian_penalty(values, edges)) <= 1e-10


class TestWarpProx:
    def test_no_representers_is_identity(self):
        phi = np.array([0.2, -1.0, 3.0])
        np.testing.assert_allclose(kw.warp_prox(np.zeros((3, 2)), phi), phi)
        np.testing.assert_allclose(kw.warp_prox_sqrt(np.zeros((3, 2)), phi), phi)

    def test_unit_representer_halves(self):
        z = np.array([[0.6], [0.8]])
        np.testing.assert_allclose(kw.warp_prox(z, z[:, 0]), 0.5 * z[:, 0], atol=1e-15)

    def test_stationarity_and_numeric_oracle(self):
        rng = np.random.default_rng(2)
        z = rng.normal(size=(6, 4))
        phi = rng.normal(size=6)
        v = kw.warp_prox(z, phi)
        assert np.abs(z @ (z.T @ v) + v - phi).max() <= 1e-10
        op = catalog.ProxOperator(
            regularizer=lambda u: 0.5 * float(np.sum((z.T @ u) ** 2)),
            gradient=lambda u: z @ (z.T @ u),
            feasible=catalog.Unconstrained(),
        )
        np.testing.assert_allclose(catalog.prox_numeric(op, phi), v, atol=1e-8)

    @pytest.mark.parametrize("p,m", [(8, 3), (8, 30), (64, 256), (40, 40)])
    def test_woodbury_matches_direct(self, p, m):
        rng = np.random.default_rng(p * m)
        z = rng.normal(size=(p, m)) / np.sqrt(m)
        phi = rng.normal(size=(5, p))
        for lam in [0.3, 1.0]:
            a = kw.warp_prox(z, phi, lam, method="direct")
            b = kw.warp_prox(z, phi, lam, method="woodbury")
            assert np.abs(a - b).max() <= 1e-8

    def test_lambda_closed_form(self):
        # c = lam (lam I + Z Z^T)^{-1} phi
        rng = np.random.default_rng(3)
        z, phi, lam = rng.normal(size=(5, 7)), rng.normal(size=5), 0.25
        expected = lam * np.linalg.solve(lam * np.eye(5) + z @ z.T, phi)
        np.testing.assert_allclose(kw.warp_prox(z, phi, lam), expected, atol=1e-12)

    def test_sqrt_against_eigendecomposition(self):
        rng = np.random.default_rng(4)
        z = rng.normal(size=(5, 3))
        phi = rng.normal(size=5)
        w, v = np.linalg.eigh(np.eye(5) + z @ z.T)
        expected = v @ np.diag(w**-0.5) @ v.T @ phi
        np.testing.assert_allclose(kw.warp_prox_sqrt(z, phi), expected, atol=1e-8)

    def test_spectral_shrinkage_ordering(self):
        rng = np.random.default_rng(5)
        z = rng.normal(size=(6, 4))
        mu, vecs = np.linalg.eigh(z @ z.T)
        for k in range(6):
            e = vecs[:, k]
            full = kw.warp_prox(z, e) @ e
            half = kw.warp_prox_sqrt(z, e) @ e
            np.testing.assert_allclose(full, 1 / (1 + mu[k]), atol=1e-10)
            np.testing.assert_allclose(half, (1 + mu[k]) ** -0.5, atol=1e-10)
            assert 0 < full <= half + 1e-12 and half <= 1 + 1e-12

    @pytest.mark.parametrize("kind", ["gradient", "laplacian"])
    def test_embedded_closed_form_vs_numeric(self, cloud, kind):
        x, nmap = cloud
        if kind == "gradient":
            z = kw.gradient_representers(nmap, x[:5])
        else:
            z = kw.laplacian_representers(nmap, [(0, 1, 1.0), (1, 2, 0.3), (3, 4, 2.0)], x)
        phi = kw.nystrom_embed(nmap, x[7])
        lam = 0.5
        op = catalog.ProxOperator(
            regularizer=lambda u: 0.5 * float(np.sum((z.T @ u) ** 2)),
            gradient=lambda u: z @ (z.T @ u),
            feasible=catalog.Unconstrained(),
            lam=lam,
        )
        np.testing.assert_allclose(
            catalog.prox_numeric(op, phi), kw.warp_prox(z, phi, lam), atol=1e-8
        )


class TestDistanceAndPca:
    def test_self_distance(self):
        assert kw.warped_distance([1.0, 2.0], [1.0, 2.0]) == 0.0

    def test_one_dimensional(self):
        assert kw.warped_distance([3.0], [-1.0]) == 4.0

    def test_triangle_inequality(self):
        rng = np.random.default_rng(6)
        for _ in range(200):
            a, b, c = rng.normal(size=(3, 4))
            assert kw.warped_distance(a, c) <= kw.warped_distance(a, b) + kw.warped_distance(b, c) + 1e-12

    def test_points_on_a_line(self):
        t = np.linspace(0, 1, 20)[:, None]
        scores = kw.kpca_top2(t * np.array([[1.0, 2.0, -1.0]]))
        assert np.linalg.norm(scores[:, 1]) <= 1e-10 * np.linalg.norm(scores[:, 0])

    def test_isotropic_split(self):
        x = make_rng(7).standard_normal((2000, 2))
        scores = kw.kpca_top2(x)
        var = (scores**2).sum(axis=0)
        share = var / var.sum()
        assert np.all(np.abs(share - 0.5) <= 0.05)
        assert var[0] >= var[1]

    def test_projection_directions_orthogonal(self):
        x = np.random.default_rng(8).normal(size=(50, 5))
        scores = kw.kpca_top2(x)
        xc = x - x.mean(axis=0)
        dirs = np.linalg.lstsq(xc, scores, rcond=None)[0]
        dirs /= np.linalg.norm(dirs, axis=0)
        assert abs(dirs[:, 0] @ dirs[:, 1]) <= 1e-10

    def test_rank_one_rejected(self):
        with pytest.raises(ValueError):
            kw.kpca_top2(np.array([[1.0, 0.0], [2.0, 0.0], [3.0, 0.0]]))

    def test_single_column_rejected(self):
        with pytest.raises(ValueError):
            kw.kpca_top2(np.ones((5, 1)) * np.arange(5)[:, None])
