from itertools import combinations, product

import numpy as np
import pytest

from core.errors import PartitionError
from core.partition.clustering import (agglomerative_partition, balanced_kmeans_partition, build_partition,
                                       cap_rows, kmeans_columns, kmeans_partition, rebalance)
from core.partition.plan import (PartitionPlan, PartitionScheme, contiguous_partition, fixed_partition,
                                 read_plan, validate_partition, write_plan)

CLUSTERING = [PartitionScheme.FIXED, PartitionScheme.KMEANS, PartitionScheme.BALANCED_KMEANS,
              PartitionScheme.AGGLOMERATIVE]


def as_sets(subsets):
    return {frozenset(s) for s in subsets}


def unit_columns(matrix):
    columns = matrix.T
    return columns / np.linalg.norm(columns, axis=1, keepdims=True)


def planted(rng, groups, rows=10, noise=0.05):
    """Columns scattered tightly around one random direction per group."""
    directions = rng.standard_normal((len(groups), rows))
    columns = [directions[g] + noise * rng.standard_normal(rows) for g in groups]
    return np.stack(columns, axis=1)


def exhaustive_kmeans(matrix, n):
    """Assignment of columns to N non-empty clusters with the smallest within-cluster sum of squares."""
    points = unit_columns(matrix)
    best, best_cost = None, np.inf
    for labels in product(range(n), repeat=points.shape[0]):
        labels = np.array(labels)
        if len(set(labels)) != n:
            continue
        cost = sum(((points[labels == k] - points[labels == k].mean(axis=0)) ** 2).sum() for k in range(n))
        if cost < best_cost - 1e-12:
            best, best_cost = labels, cost
    return [np.flatnonzero(best == k).tolist() for k in range(n)]


def naive_complete_linkage(matrix, n):
    points = unit_columns(matrix)
    distance = 1.0 - points @ points.T
    clusters = [[i] for i in range(points.shape[0])]
    while len(clusters) > n:
        pairs = combinations(range(len(clusters)), 2)
        a, b = min(pairs, key=lambda p: max(distance[i, j] for i in clusters[p[0]] for j in clusters[p[1]]))
        clusters[a] = clusters[a] + clusters[b]
        del clusters[b]
    return clusters


def best_single_moves(points, labels, centroids, target):
    """Repeat the cheapest single move out of an oversized cluster into the first short one."""
    labels = labels.copy()
    while True:
        sizes = [int((labels == k).sum()) for k in range(len(centroids))]
        short = [k for k, size in enumerate(sizes) if size < target]
        if not short:
            return labels
        moves = [(float(((points[i] - centroids[short[0]]) ** 2).sum()), i)
                 for i in range(len(labels)) if sizes[labels[i]] > target]
        labels[min(moves)[1]] = short[0]


class TestPlans:
    def test_fixed_contiguous_blocks(self):
        plan = fixed_partition(64, 4)
        assert plan.subsets == [list(range(i * 16, (i + 1) * 16)) for i in range(4)]

    def test_fixed_uneven_split(self):
        assert fixed_partition(10, 3).sizes == [4, 3, 3]

    def test_fixed_random_is_seeded(self):
        a = fixed_partition(12, 3, mode="random", seed=5)
        b = fixed_partition(12, 3, mode="random", seed=5)
        assert a.subsets == b.subsets
        assert validate_partition(a, 12).ok

    def test_contiguous_needs_divisible_width(self):
        with pytest.raises(PartitionError):
            contiguous_partition(10, 3)

    def test_too_many_students(self):
        with pytest.raises(PartitionError):
            fixed_partition(3, 4)

    def test_validation_reports_every_defect(self):
        plan = PartitionPlan([[0, 1, 1], [], [7]], PartitionScheme.FIXED, 4)
        report = validate_partition(plan, 4)
        assert report.duplicates == [1]
        assert report.gaps == [2, 3]
        assert report.out_of_range == [7]
        assert report.empty_subsets == [1]
        with pytest.raises(PartitionError):
            plan.check()

    def test_mappings_are_inverse(self):
        plan = PartitionPlan([[1, 3], [0, 2, 4]], PartitionScheme.KMEANS, 5).check()
        mapping, inverse = plan.index_mapping(), plan.inverse_mapping()
        np.testing.assert_array_equal(mapping[inverse], np.arange(5))
        assert plan.offsets() == [0, 2]

    def test_plan_file_round_trip(self, tmp_path):
        plan = PartitionPlan([[1, 3], [0, 2, 4]], PartitionScheme.AGGLOMERATIVE, 5, seed=9).check()
        loaded = read_plan(write_plan(plan, tmp_path / "plan.yaml"))
        assert loaded == plan

    def test_malformed_plan_file(self, tmp_path):
        path = tmp_path / "plan.yaml"
        path.write_text("scheme: fixed\nfeature_dim: 4\nsubsets: [[0, 1], [1, 2]]\n")
        with pytest.raises(PartitionError):
            read_plan(path)


class TestClustering:
    def test_all_schemes_valid_on_random_matrices(self):
        rng = np.random.default_rng(0)
        for trial in range(50):
            dim = int(rng.integers(4, 17))
            n = int(rng.integers(2, min(4, dim) + 1))
            matrix = rng.standard_normal((int(rng.integers(3, 20)), dim))
            for scheme in CLUSTERING:
                plan = build_partition(scheme, n, dim, matrix, seed=trial)
                assert validate_partition(plan, dim).ok, (trial, scheme)
                assert plan.n_students == n
                assert [s[0] for s in plan.subsets] == sorted(s[0] for s in plan.subsets)
            sizes = build_partition(PartitionScheme.BALANCED_KMEANS, n, dim, matrix, seed=trial).sizes
            assert max(sizes) - min(sizes) <= 1

    def test_identical_column_groups_recovered(self):
        a, b = np.array([1.0, 0.0, 2.0]), np.array([0.0, 3.0, -1.0])
        matrix = np.stack([a, b, a, a, b, b * 2], axis=1)
        expected = {frozenset({0, 2, 3}), frozenset({1, 4, 5})}
        assert as_sets(kmeans_partition(matrix, 2, seed=0).subsets) == expected
        assert as_sets(agglomerative_partition(matrix, 2).subsets) == expected

    @pytest.mark.parametrize("groups", [[0, 1, 0, 1, 1, 0], [0, 1, 2, 0, 1, 2, 2, 0]])
    def test_kmeans_matches_exhaustive_search(self, rng, groups):
        matrix = planted(rng, groups)
        n = len(set(groups))
        assert as_sets(kmeans_partition(matrix, n, seed=1).subsets) == as_sets(exhaustive_kmeans(matrix, n))

    def test_kmeans_objective_never_increases(self, rng):
        run = kmeans_columns(rng.standard_normal((12, 10)), 3, seed=0, n_init=1)
        assert all(b <= a + 1e-9 for a, b in zip(run.history, run.history[1:]))

    @pytest.mark.parametrize("dim,n", [(5, 2), (6, 3), (8, 2)])
    def test_agglomerative_matches_naive_linkage(self, rng, dim, n):
        matrix = rng.standard_normal((7, dim))
        assert as_sets(agglomerative_partition(matrix, n).subsets) == as_sets(naive_complete_linkage(matrix, n))

    def test_rebalance_moves_closest_donors(self):
        points = np.array([[0.0, 0.0], [0.1, 0.0], [0.9, 0.0], [0.5, 0.0], [0.8, 0.0], [1.0, 0.0]])
        labels = np.array([0, 0, 0, 0, 0, 1])
        centroids = np.array([[0.0, 0.0], [1.0, 0.0]])
        best = min(combinations(range(5), 2),
                   key=lambda moved: sum(((points[i] - centroids[1]) ** 2).sum() for i in moved))
        expected = labels.copy()
        expected[list(best)] = 1
        np.testing.assert_array_equal(rebalance(points, labels, centroids), expected)

    @pytest.mark.parametrize("n", [2, 3])
    def test_rebalance_matches_single_move_search(self, n):
        rng = np.random.default_rng(n)
        target = 6 // n
        for _ in range(20):
            points = rng.standard_normal((6, 3))
            labels = rng.integers(0, n, 6)
            centroids = rng.standard_normal((n, 3))
            expected = best_single_moves(points, labels, centroids, target)
            balanced = rebalance(points, labels, centroids)
            np.testing.assert_array_equal(balanced, expected)
            assert np.all(np.bincount(balanced, minlength=n) == target)
            deficit = np.clip(target - np.bincount(labels, minlength=n), 0, None).sum()
            assert (balanced != labels).sum() == deficit

    @pytest.mark.parametrize("dim", [3, 5])
    def test_one_cluster_per_column(self, rng, dim):
        matrix = rng.standard_normal((6, dim))
        singletons = [[i] for i in range(dim)]
        assert kmeans_partition(matrix, dim, seed=0).subsets == singletons
        assert agglomerative_partition(matrix, dim).subsets == singletons

    def test_balanced_sizes_on_planted_groups(self, rng):
        matrix = planted(rng, [0, 0, 0, 0, 0, 1, 1])
        assert sorted(balanced_kmeans_partition(matrix, 2, seed=0).sizes) == [3, 4]

    def test_clustering_needs_matrix(self):
        with pytest.raises(PartitionError):
            build_partition(PartitionScheme.KMEANS, 2, 8)

    def test_non_finite_matrix_rejected(self):
        matrix = np.ones((3, 4))
        matrix[0, 0] = np.nan
        with pytest.raises(PartitionError):
            kmeans_partition(matrix, 2)

    def test_row_cap_keeps_dataset_order(self):
        matrix = np.arange(20, dtype=float).reshape(10, 2)
        capped = cap_rows(matrix, 4, seed=0)
        assert capped.shape == (4, 2)
        assert np.all(np.diff(capped[:, 0]) > 0)
