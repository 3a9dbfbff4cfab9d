import itertools

import numpy as np
import pytest

from expertmap.cogeometry import (AffinityMatrix, PartitionTree, TreeConfig,
                                  build_partition_tree, cosine_affinity,
                                  coupled_refine, emd_affinity, impute,
                                  imputed_vector, impute_matrix,
                                  tree_emd_distance)
from expertmap.dataset import DataMatrix, ReferenceSet, select_reference
from expertmap.errors import ValidationError


def matrix_from(values):
    values = np.asarray(values, dtype=float)
    mask = np.isfinite(values)
    n, m = values.shape
    names = tuple(f"q{k}" for k in range(m))
    return DataMatrix(values=values, mask=mask, feature_names=names,
                      point_ids=tuple(f"p{i}" for i in range(n)),
                      group_of={f: "default" for f in names},
                      weight_of={"default": 1.0})


def full_reference(d):
    return ReferenceSet(indices=np.arange(d.n_points), eta=d.n_features)


NA = np.nan


class TestCosineAffinity:
    def test_hand_support_restricted(self):
        d = matrix_from([[1.0, 2.0, NA], [2.0, 4.0, 5.0]])
        a = cosine_affinity(full_reference(d), d)
        # over the shared support {0, 1}: 10 / (sqrt(5) * sqrt(20)) = 1
        assert a.entries[0, 1] == pytest.approx(1.0)

    def test_hand_orthogonal(self):
        d = matrix_from([[1.0, 0.0, NA], [0.0, 1.0, 3.0]])
        a = cosine_affinity(full_reference(d), d)
        assert a.entries[0, 1] == pytest.approx(0.0)

    def test_self_affinity_is_one(self):
        d = matrix_from([[1.0, 2.0, 3.0], [1.0, 2.0, 3.0]])
        a = cosine_affinity(full_reference(d), d)
        assert a.entries[0, 1] == pytest.approx(1.0)
        np.testing.assert_array_equal(np.diag(a.entries), 1.0)

    def test_symmetry_and_range(self):
        rng = np.random.default_rng(0)
        values = rng.normal(size=(25, 6))
        values[rng.random((25, 6)) < 0.2] = NA
        # keep joint support nonempty: first two columns always observed
        values[:, :2] = rng.normal(size=(25, 2))
        d = matrix_from(values)
        a = cosine_affinity(full_reference(d), d)
        assert np.max(np.abs(a.entries - a.entries.T)) <= 1e-12
        assert a.entries.min() >= -1.0 and a.entries.max() <= 1.0

    def test_empty_joint_support_is_hard_error(self):
        d = matrix_from([[1.0, NA], [NA, 2.0]])
        with pytest.raises(ValidationError, match="no"):
            cosine_affinity(full_reference(d), d)

    def test_zero_restricted_norm_flagged(self):
        d = matrix_from([[0.0, 0.0], [1.0, 2.0]])
        a = cosine_affinity(full_reference(d), d)
        assert a.entries[0, 1] == 0.0
        assert (0, 1) in a.flagged_pairs


def pair_block_affinity():
    entries = np.array([[1.0, 0.9, 0.1, 0.1],
                        [0.9, 1.0, 0.1, 0.1],
                        [0.1, 0.1, 1.0, 0.9],
                        [0.1, 0.1, 0.9, 1.0]])
    return AffinityMatrix(entries=entries, kind="kernel")


class TestBuildPartitionTree:
    def test_recovers_best_two_partition(self):
        a = pair_block_affinity()
        tree = build_partition_tree(a, TreeConfig(depth=2))
        level2 = set(tree.folders_at(2))

        # brute-force oracle: the pair split maximizing within-folder affinity
        best, best_score = None, -np.inf
        for combo in itertools.combinations(range(4), 2):
            rest = tuple(i for i in range(4) if i not in combo)
            score = a.entries[combo[0], combo[1]] + a.entries[rest[0], rest[1]]
            if score > best_score:
                best, best_score = {combo, rest}, score
        assert level2 == best

    def test_depth_one_single_root(self):
        tree = build_partition_tree(pair_block_affinity(), TreeConfig(depth=1))
        assert tree.depth == 1
        assert tree.folders_at(1) == ((0, 1, 2, 3),)

    def test_identical_rows_satisfy_invariants(self):
        n = 8
        a = AffinityMatrix(entries=np.ones((n, n)), kind="kernel")
        tree = build_partition_tree(a, TreeConfig(depth=3))
        # construction of PartitionTree revalidates nesting/cover invariants
        assert tree.depth >= 2
        assert sum(len(f) for f in tree.folders_at(tree.depth)) == n

    def test_invariants_on_random_affinity(self):
        rng = np.random.default_rng(1)
        pts = rng.normal(size=(30, 3))
        from expertmap.spectral import gaussian_kernel
        k = gaussian_kernel(pts, r=5)
        a = AffinityMatrix(entries=k.entries, kind="kernel")
        tree = build_partition_tree(a, TreeConfig(depth=4))
        assert tree.depth == 4
        for level in range(1, 5):
            assert len(tree.folders_at(level)) <= 2 ** (level - 1)

    def test_non_finite_rejected(self):
        entries = np.ones((3, 3))
        entries[0, 1] = entries[1, 0] = np.inf
        with pytest.raises(ValidationError):
            AffinityMatrix(entries=entries, kind="kernel")

    def test_json_round_trip(self, tmp_path):
        tree = build_partition_tree(pair_block_affinity(), TreeConfig(depth=2))
        path = tmp_path / "tree.json"
        tree.save(path)
        again = PartitionTree.load(path)
        assert again == tree


def line_tree():
    # 4 observations, 2 levels: root + two pairs
    return PartitionTree(axis="observations",
                         levels=(((0, 1, 2, 3),), ((0, 1), (2, 3))))


class TestTreeEmd:
    def test_zero_on_equal_vectors(self):
        x = np.array([1.0, 2.0, 3.0, 4.0])
        assert tree_emd_distance(line_tree(), x, x) == 0.0

    def test_root_only_collapses_to_mean_gap(self):
        tree = PartitionTree(axis="observations", levels=(((0, 1, 2),),))
        x = np.array([1.0, 2.0, 3.0])
        y = np.array([2.0, 3.0, 4.0])
        # single folder of size 3, weight 2^0: 3 * |mean gap| = 3 * 1
        assert tree_emd_distance(tree, x, y) == pytest.approx(3.0)

    def test_symmetry(self):
        rng = np.random.default_rng(2)
        x, y = rng.normal(size=4), rng.normal(size=4)
        t = line_tree()
        assert tree_emd_distance(t, x, y) == pytest.approx(tree_emd_distance(t, y, x))

    def test_triangle_inequality(self):
        rng = np.random.default_rng(3)
        tree = build_partition_tree(pair_block_affinity(), TreeConfig(depth=2))
        tree = PartitionTree(axis="observations", levels=tree.levels)
        for _ in range(200):
            x, y, z = rng.normal(size=(3, 4))
            dxy = tree_emd_distance(tree, x, y)
            dyz = tree_emd_distance(tree, y, z)
            dxz = tree_emd_distance(tree, x, z)
            assert dxz <= dxy + dyz + 1e-12

    def test_missing_entries_excluded_symmetrically(self):
        tree = line_tree()
        x = np.array([1.0, NA, 3.0, 4.0])
        y = np.array([0.5, 7.0, 3.0, 4.0])
        d = tree_emd_distance(tree, x, y)
        assert np.isfinite(d) and d > 0
        # swapping arguments keeps the exclusion symmetric
        assert d == pytest.approx(tree_emd_distance(tree, y, x))


def planted_blocks(n_per=12, m_per=4, seed=4, sep=5.0):
    """2 point clusters x 2 feature groups with >= 5 sigma separation."""
    rng = np.random.default_rng(seed)
    n, m = 2 * n_per, 2 * m_per
    values = rng.normal(0.0, 1.0, size=(n, m))
    values[:n_per, :m_per] += sep
    values[:n_per, m_per:] -= sep
    values[n_per:, :m_per] -= sep
    values[n_per:, m_per:] += sep
    return matrix_from(values)


class TestCoupledRefine:
    def test_recovers_planted_blocks(self):
        d = planted_blocks()
        omega = full_reference(d)
        points_tree, obs_tree, affinity = coupled_refine(
            omega, d, iters=1, cfg=TreeConfig(depth=2))
        assert set(points_tree.folders_at(2)) == {tuple(range(12)), tuple(range(12, 24))}
        assert set(obs_tree.folders_at(2)) == {tuple(range(4)), tuple(range(4, 8))}
        assert affinity.entries.min() >= 0.0 and affinity.entries.max() <= 1.0

    def test_stable_across_iteration_counts(self):
        d = planted_blocks(seed=5)
        omega = full_reference(d)
        one = coupled_refine(omega, d, iters=1, cfg=TreeConfig(depth=2))
        three = coupled_refine(omega, d, iters=3, cfg=TreeConfig(depth=2))
        assert set(one[0].folders_at(2)) == set(three[0].folders_at(2))

    def test_permutation_equivariance(self):
        d = planted_blocks(seed=6)
        rng = np.random.default_rng(7)
        perm = rng.permutation(d.n_points)
        permuted = DataMatrix(values=d.values[perm], mask=d.mask[perm],
                              feature_names=d.feature_names,
                              point_ids=tuple(d.point_ids[i] for i in perm),
                              group_of=d.group_of, weight_of=d.weight_of)
        tree_a = coupled_refine(full_reference(d), d, 1, TreeConfig(depth=2))[0]
        tree_b = coupled_refine(full_reference(permuted), permuted, 1,
                                TreeConfig(depth=2))[0]
        original = {frozenset(f) for f in tree_a.folders_at(2)}
        mapped = {frozenset(perm[list(f)].tolist()) for f in tree_b.folders_at(2)}
        assert original == mapped

    def test_missing_entries_handled(self):
        d = planted_blocks(seed=8)
        values = d.values.copy()
        rng = np.random.default_rng(9)
        holes = rng.random(values.shape) < 0.1
        values[holes] = NA
        d2 = matrix_from(values)
        omega = select_reference(d2, d2.n_features)
        points_tree, obs_tree, _ = coupled_refine(omega, d2, iters=1,
                                                  cfg=TreeConfig(depth=2))
        assert set(points_tree.folders_at(2)) == {tuple(range(12)), tuple(range(12, 24))}


class TestImpute:
    def tree(self):
        return PartitionTree(axis="observations",
                             levels=(((0, 1, 2, 3, 4),), ((0, 1), (2, 3, 4))))

    def test_folder_mean(self):
        v = np.array([9.0, 9.0, NA, 2.0, 4.0])
        result = impute(v, self.tree())
        assert len(result) == 1
        imp = result[0]
        assert imp.value == pytest.approx(3.0)
        assert imp.level == 2
        assert imp.support_count == 2

    def test_root_fallback_max_uncertainty(self):
        v = np.array([1.0, 3.0, NA, NA, NA])
        by_index = {imp.index: imp for imp in impute(v, self.tree())}
        assert by_index[2].level == 1
        assert by_index[2].value == pytest.approx(2.0)

    def test_fully_observed_gives_empty_list(self):
        assert impute(np.arange(5.0), self.tree()) == []

    def test_all_missing_rejected(self):
        with pytest.raises(ValidationError, match="no observed"):
            impute(np.full(5, NA), self.tree())

    def test_level_deepens_as_siblings_appear(self):
        tree = PartitionTree(
            axis="observations",
            levels=(((0, 1, 2, 3),), ((0, 1), (2, 3))))
        v = np.array([NA, NA, 5.0, 7.0])
        first = impute(v, tree)[0]
        assert first.index == 0 and first.level == 1
        v2 = np.array([NA, 4.0, 5.0, 7.0])
        second = [imp for imp in impute(v2, tree) if imp.index == 0][0]
        assert second.level == 2
        assert second.value == pytest.approx(4.0)

    def test_never_reads_masked_entries(self):
        v = np.array([NA, 4.0, NA, 6.0, 8.0])
        for imp in impute(v, self.tree()):
            assert np.isfinite(imp.value)
        filled = imputed_vector(v, self.tree())
        assert filled[0] == pytest.approx(4.0)
        assert filled[2] == pytest.approx(7.0)

    def test_matrix_imputation_matches_vector_path(self):
        rng = np.random.default_rng(10)
        rows = rng.normal(size=(20, 5))
        rows[rng.random((20, 5)) < 0.3] = NA
        rows[:, 0] = rng.normal(size=20)   # keep every row imputable
        tree = self.tree()
        fast = impute_matrix(rows, tree)
        slow = np.vstack([imputed_vector(rows[i], tree) for i in range(20)])
        np.testing.assert_allclose(fast, slow, atol=1e-12)


def test_emd_affinity_uses_median_bandwidth():
    d = planted_blocks(seed=11)
    tree = PartitionTree(axis="observations",
                         levels=(((0, 1, 2, 3, 4, 5, 6, 7),),
                                 ((0, 1, 2, 3), (4, 5, 6, 7))))
    a = emd_affinity(tree, d.values)
    assert a.entries.min() >= 0.0 and a.entries.max() <= 1.0
    np.testing.assert_array_equal(np.diag(a.entries), 1.0)
