import numpy as np
import pytest

from expertmap.spectral import Embedding, Kernel, diffusion_embed, nn_bandwidth
from expertmap.whiten import (LocalMoments, extend_standardized, local_moments,
                              one_sided_cross_kernel, standardized_embedding,
                              whitened_distance, whitened_distance_matrix)


def coords_embedding(coords, t=1.0):
    """Embedding whose diffusion coordinates are exactly ``coords``."""
    coords = np.asarray(coords, dtype=float)
    return Embedding(eigenvalues=np.ones(coords.shape[1]),
                     eigenvectors=coords, t=t)


def identity_moments(n, d, coords):
    eye = np.tile(np.eye(d), (n, 1, 1))
    return LocalMoments(neighborhoods=np.tile(np.arange(n), (n, 1))[:, :1],
                        mu=np.zeros((n, d)), sigma=eye, sigma_pinv=eye, k=1)


class TestLocalMoments:
    def test_identical_neighbors_zero_covariance(self):
        emb = coords_embedding(np.zeros((5, 2)))
        lm = local_moments(emb, k=5)
        np.testing.assert_array_equal(lm.sigma, 0.0)
        np.testing.assert_array_equal(lm.sigma_pinv, 0.0)

    def test_hand_three_point_neighborhood(self):
        emb = coords_embedding([[-1.0, 0.0], [1.0, 0.0], [0.0, 0.0]])
        lm = local_moments(emb, k=3)
        np.testing.assert_allclose(lm.mu[2], [0.0, 0.0], atol=1e-12)
        np.testing.assert_allclose(lm.sigma[2], np.diag([2.0 / 3.0, 0.0]), atol=1e-12)

    def test_k_equals_n_shares_moments(self):
        rng = np.random.default_rng(0)
        emb = coords_embedding(rng.normal(size=(12, 3)))
        lm = local_moments(emb, k=12)
        for i in range(1, 12):
            np.testing.assert_allclose(lm.mu[i], lm.mu[0], atol=1e-12)
            np.testing.assert_allclose(lm.sigma[i], lm.sigma[0], atol=1e-12)

    def test_penrose_conditions(self):
        rng = np.random.default_rng(1)
        emb = coords_embedding(rng.normal(size=(30, 3)))
        lm = local_moments(emb, k=6)   # k < 2d+2: rank deficiency expected
        for i in range(30):
            s, p = lm.sigma[i], lm.sigma_pinv[i]
            np.testing.assert_allclose(s @ p @ s, s, atol=1e-8)
            np.testing.assert_allclose(p @ s @ p, p, atol=1e-8)
            np.testing.assert_allclose((s @ p).T, s @ p, atol=1e-8)
            np.testing.assert_allclose((p @ s).T, p @ s, atol=1e-8)

    def test_neighborhood_size_clamped(self):
        emb = coords_embedding(np.random.default_rng(2).normal(size=(4, 2)))
        lm = local_moments(emb, k=50)
        assert lm.k == 4


class TestWhitenedDistance:
    def test_identity_moments_reduce_to_squared_euclidean(self):
        rng = np.random.default_rng(3)
        coords = rng.normal(size=(8, 2))
        emb = coords_embedding(coords)
        lm = identity_moments(8, 2, coords)
        for i in range(8):
            for j in range(8):
                expected = np.sum((coords[i] - coords[j]) ** 2)
                assert whitened_distance(lm, emb, i, j) == pytest.approx(expected)

    def test_zero_on_self(self):
        rng = np.random.default_rng(4)
        emb = coords_embedding(rng.normal(size=(10, 3)))
        lm = local_moments(emb, k=5)
        for i in range(10):
            assert whitened_distance(lm, emb, i, i) == 0.0

    def test_matrix_matches_pairwise_and_is_symmetric(self):
        rng = np.random.default_rng(5)
        emb = coords_embedding(rng.normal(size=(12, 2)))
        lm = local_moments(emb, k=6)
        mat = whitened_distance_matrix(lm, emb)
        np.testing.assert_allclose(mat, mat.T, atol=1e-12)
        for i in range(0, 12, 3):
            for j in range(0, 12, 4):
                assert mat[i, j] == pytest.approx(whitened_distance(lm, emb, i, j),
                                                  abs=1e-10)

    def test_global_scale_invariance(self):
        rng = np.random.default_rng(6)
        coords = rng.normal(size=(25, 3))
        for c in (0.1, 3.0, 42.0):
            emb1 = coords_embedding(coords)
            emb2 = coords_embedding(c * coords)
            lm1 = local_moments(emb1, k=8)
            lm2 = local_moments(emb2, k=8)
            d1 = whitened_distance_matrix(lm1, emb1)
            d2 = whitened_distance_matrix(lm2, emb2)
            np.testing.assert_allclose(d1, d2, atol=1e-8 * max(1.0, d1.max()))


def two_spread_clusters(n_per=40, ratio=10.0, gap=12.0, seed=7):
    rng = np.random.default_rng(seed)
    wide = rng.normal(0.0, 1.0, size=(n_per, 2))
    tight = rng.normal(0.0, 1.0 / ratio, size=(n_per, 2)) + np.array([gap, 0.0])
    return np.vstack([wide, tight])


def within_cluster_ratio(coords, n_per):
    from scipy.spatial.distance import pdist
    wide = pdist(coords[:n_per]).mean()
    tight = pdist(coords[n_per:]).mean()
    return wide / tight


class TestStandardizedEmbedding:
    def test_identity_moments_match_plain_diffusion(self):
        rng = np.random.default_rng(8)
        coords = rng.normal(size=(30, 2))
        emb = coords_embedding(coords)
        lm = identity_moments(30, 2, coords)
        std = standardized_embedding(emb, lm, d=2, t=1.0, r=5)

        from scipy.spatial.distance import cdist
        sq = cdist(coords, coords) ** 2
        sigma = nn_bandwidth(sq, 5)
        entries = np.exp(-sq / sigma)
        np.fill_diagonal(entries, 1.0)
        plain = diffusion_embed(Kernel(entries=0.5 * (entries + entries.T)), d=2)
        np.testing.assert_allclose(std.coordinates, plain.coordinates, atol=1e-8)
        assert std.standardized

    def test_homogenizes_planted_spread_ratio(self):
        coords = two_spread_clusters()
        emb = coords_embedding(coords)
        before = within_cluster_ratio(emb.coordinates, 40)
        assert before > 4.0

        lm = local_moments(emb, k=20)
        # d large enough to carry the internal modes of both clusters
        std = standardized_embedding(emb, lm, d=6, t=1.0, r=10)
        after = within_cluster_ratio(std.coordinates, 40)
        assert 0.5 <= after <= 2.0
        assert abs(after - 1.0) < abs(before - 1.0)   # strictly toward 1

        # the whitened distances themselves are already homogenized
        dmat = whitened_distance_matrix(lm, emb)
        wide = dmat[:40, :40][np.triu_indices(40, 1)].mean()
        tight = dmat[40:, 40:][np.triu_indices(40, 1)].mean()
        assert 0.5 <= wide / tight <= 2.0

    def test_permutation_invariance_up_to_rows(self):
        rng = np.random.default_rng(9)
        coords = rng.normal(size=(20, 2))
        perm = rng.permutation(20)
        std1 = standardized_embedding(coords_embedding(coords),
                                      local_moments(coords_embedding(coords), k=6),
                                      d=2, r=5)
        std2 = standardized_embedding(coords_embedding(coords[perm]),
                                      local_moments(coords_embedding(coords[perm]), k=6),
                                      d=2, r=5)
        np.testing.assert_allclose(std2.coordinates, std1.coordinates[perm], atol=1e-8)


class TestExtendStandardized:
    def constant_moment_setup(self, seed=10):
        rng = np.random.default_rng(seed)
        coords = rng.normal(size=(25, 2))
        emb = coords_embedding(coords)
        # spatially constant moments: every point shares the global ones
        lm_global = local_moments(emb, k=25)
        std = standardized_embedding(emb, lm_global, d=3, t=1.0, r=5)
        return coords, emb, lm_global, std

    def test_self_extension_proportional_to_sqrt_s_psi(self):
        coords, emb, lm, std = self.constant_moment_setup()
        # with constant moments, b at half the bandwidth coincides with the
        # standardized kernel W, so the plain Nystrom algebra applies exactly
        sigma = std.bandwidth["value"]
        extended = extend_standardized(lm, emb, std, coords, sigma=sigma / 2.0)
        expected = std.eigenvectors * np.sqrt(std.eigenvalues)[None, :]
        np.testing.assert_allclose(extended, expected,
                                   atol=1e-8 * np.abs(expected).max())

    def test_duplicate_point_matches_reference_row(self):
        coords, emb, lm, std = self.constant_moment_setup(seed=11)
        z = 4
        whole = extend_standardized(lm, emb, std, coords)
        dup = extend_standardized(lm, emb, std, coords[[z]])
        np.testing.assert_allclose(dup[0], whole[z], atol=1e-8)

    def test_uniform_row_gives_scaled_mean(self):
        rng = np.random.default_rng(12)
        coords = rng.normal(size=(15, 2))
        emb = coords_embedding(coords)
        lm_real = local_moments(emb, k=6)
        std = standardized_embedding(emb, lm_real, d=2, t=1.0, r=5)
        # zero pseudoinverses make every one-sided affinity 1 (uniform row)
        lm_flat = LocalMoments(neighborhoods=lm_real.neighborhoods, mu=lm_real.mu,
                               sigma=np.zeros_like(lm_real.sigma),
                               sigma_pinv=np.zeros_like(lm_real.sigma_pinv),
                               k=lm_real.k)
        out = extend_standardized(lm_flat, emb, std, coords[[0]])
        expected = std.eigenvectors.mean(axis=0) / np.sqrt(std.eigenvalues)
        np.testing.assert_allclose(out[0], expected, atol=1e-10)

    def test_one_sided_kernel_centers_cancel(self):
        rng = np.random.default_rng(13)
        coords = rng.normal(size=(10, 2))
        emb = coords_embedding(coords)
        lm = local_moments(emb, k=4)
        b = one_sided_cross_kernel(lm, coords, coords[:3], sigma=1.0)
        # the mu_y centering appears on both sides and cancels exactly
        for i in range(3):
            for j in range(10):
                delta = coords[i] - coords[j]
                expected = np.exp(-0.5 * delta @ lm.sigma_pinv[j] @ delta)
                assert b[i, j] == pytest.approx(expected, rel=1e-12)
