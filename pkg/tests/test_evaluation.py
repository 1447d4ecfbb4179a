import itertools

import numpy as np
import pytest

from pown import evaluation as ev
from pown import graphdata as gd
from pown.errors import CapabilityError, ContractViolation


def brute_force_assignment_cost(cost):
    """Exhaustive minimum over all permutations of the padded square matrix."""
    cost = np.asarray(cost, dtype=float)
    size = max(cost.shape)
    padded = np.zeros((size, size))
    padded[: cost.shape[0], : cost.shape[1]] = cost
    best = np.inf
    for perm in itertools.permutations(range(size)):
        best = min(best, sum(padded[i, perm[i]] for i in range(size)))
    return best


class TestHungarian:
    def test_two_by_two(self):
        result = ev.hungarian([[1.0, 2.0], [2.0, 1.0]])
        assert result.mapping == {0: 0, 1: 1}
        assert result.total_cost == pytest.approx(2.0)

    def test_identity_cost(self):
        cost = 1.0 - np.eye(3)
        result = ev.hungarian(cost)
        assert result.mapping == {0: 0, 1: 1, 2: 2}
        assert result.total_cost == pytest.approx(0.0)

    def test_five_by_five_matches_brute_force(self):
        rng = np.random.default_rng(0)
        cost = rng.integers(0, 20, size=(5, 5)).astype(float)
        result = ev.hungarian(cost)
        assert result.total_cost == pytest.approx(brute_force_assignment_cost(cost))

    def test_property_suite_up_to_six(self):
        rng = np.random.default_rng(1)
        for _ in range(200):
            rows = rng.integers(1, 7)
            cols = rng.integers(1, 7)
            cost = rng.normal(size=(rows, cols)) * rng.integers(1, 10)
            result = ev.hungarian(cost)
            assert result.total_cost == pytest.approx(
                brute_force_assignment_cost(cost), abs=1e-9)
            # The mapping is a permutation of the padded index set.
            size = max(rows, cols)
            assert sorted(result.mapping) == list(range(size))
            assert sorted(result.mapping.values()) == list(range(size))

    def test_empty_rejected(self):
        with pytest.raises(ContractViolation):
            ev.hungarian(np.zeros((0, 0)))


class TestMatchedAccuracy:
    def test_permuted_predictions_score_one(self):
        truths = np.array([0, 1, 2, 0, 1, 2])
        permutation = {0: 2, 1: 0, 2: 1}
        preds = np.array([permutation[t] for t in truths])
        assert ev.matched_accuracy(preds, truths, np.arange(6)) == 1.0

    def test_constant_prediction_on_balanced_classes(self):
        truths = np.array([0, 1, 2, 3] * 5)
        preds = np.zeros(20, dtype=int)
        assert ev.matched_accuracy(preds, truths, np.arange(20)) == 0.25

    def test_six_node_toy_enumerated(self):
        # One error under the best matching: 5/6.
        truths = np.array([0, 0, 1, 1, 2, 2])
        preds = np.array([5, 5, 7, 7, 9, 7])
        assert ev.matched_accuracy(preds, truths, np.arange(6)) == pytest.approx(5 / 6)

    def test_invariant_under_prediction_relabeling(self):
        rng = np.random.default_rng(2)
        truths = rng.integers(0, 4, size=50)
        preds = rng.integers(0, 4, size=50)
        base = ev.matched_accuracy(preds, truths, np.arange(50))
        relabel = np.array([3, 0, 2, 1])
        assert ev.matched_accuracy(relabel[preds], truths,
                                   np.arange(50)) == pytest.approx(base)

    def test_subset_restriction(self):
        truths = np.array([0, 0, 1, 1])
        preds = np.array([9, 9, 9, 9])
        assert ev.matched_accuracy(preds, truths, [0, 1]) == 1.0

    def test_empty_subset_rejected(self):
        with pytest.raises(ContractViolation):
            ev.matched_accuracy([0], [0], [])


class TestAccuracyKnown:
    def test_all_correct(self):
        assert ev.accuracy_known([1, 2, 3], [1, 2, 3], [0, 1, 2]) == 1.0

    def test_no_matching_applied(self):
        truths = np.array([0, 1, 0, 1])
        shifted = (truths + 1) % 2
        assert ev.accuracy_known(shifted, truths, np.arange(4)) == 0.0
        assert ev.matched_accuracy(shifted, truths, np.arange(4)) == 1.0


class TestKmeans:
    def brute_force_two_clusters(self, points):
        best_cost, best_split = np.inf, None
        n = len(points)
        for bits in range(1, 2 ** (n - 1)):
            mask = np.array([(bits >> i) & 1 for i in range(n)], dtype=bool)
            cost = 0.0
            for group in (points[mask], points[~mask]):
                if len(group):
                    cost += np.square(group - group.mean(axis=0)).sum()
            if cost < best_cost:
                best_cost, best_split = cost, mask
        return best_cost, best_split

    def test_two_well_separated_pairs(self):
        points = np.array([[0.0, 0.0], [0.0, 1.0], [10.0, 0.0], [10.0, 1.0]])
        oracle_cost, oracle_mask = self.brute_force_two_clusters(points)
        labels, centers = ev.kmeans(points, 2, seed=0)
        achieved = np.square(points - centers[labels]).sum()
        assert achieved == pytest.approx(oracle_cost)
        assert labels[0] == labels[1] and labels[2] == labels[3]
        assert labels[0] != labels[2]

    def test_k_one_returns_mean(self):
        rng = np.random.default_rng(3)
        points = rng.normal(size=(20, 3))
        labels, centers = ev.kmeans(points, 1, seed=1)
        np.testing.assert_array_equal(labels, 0)
        np.testing.assert_allclose(centers[0], points.mean(axis=0), atol=1e-12)

    def test_deterministic(self):
        rng = np.random.default_rng(4)
        points = rng.normal(size=(60, 4))
        a, _ = ev.kmeans(points, 4, seed=9)
        b, _ = ev.kmeans(points, 4, seed=9)
        np.testing.assert_array_equal(a, b)

    def test_objective_non_increasing(self):
        rng = np.random.default_rng(5)
        points = rng.normal(size=(80, 5))
        _, _, inertia = ev.kmeans(points, 5, seed=2, return_inertia=True)
        assert all(a >= b - 1e-9 for a, b in zip(inertia, inertia[1:]))

    def test_k_larger_than_points_rejected(self):
        with pytest.raises(ContractViolation):
            ev.kmeans(np.zeros((2, 2)), 3, seed=0)

    def test_no_empty_clusters(self):
        rng = np.random.default_rng(6)
        points = rng.normal(size=(30, 2))
        labels, _ = ev.kmeans(points, 6, seed=3)
        assert np.unique(labels).size == 6


class TestConstrainedKmeans:
    def test_all_points_anchored(self):
        rng = np.random.default_rng(7)
        points = rng.normal(size=(10, 2))
        anchors = np.arange(10)
        clusters = np.array([0, 1] * 5)
        labels = ev.constrained_kmeans(points, 2, anchors, clusters, seed=0)
        np.testing.assert_array_equal(labels, clusters)

    def test_no_anchors_identical_to_kmeans(self):
        rng = np.random.default_rng(8)
        points = rng.normal(size=(40, 3))
        plain, _ = ev.kmeans(points, 3, seed=5)
        constrained = ev.constrained_kmeans(points, 3, [], [], seed=5)
        np.testing.assert_array_equal(plain, constrained)

    def test_anchors_keep_ids_on_separated_data(self):
        points = np.array([
            [0.0, 0.0], [0.1, 0.0],      # blob A
            [50.0, 0.0], [50.1, 0.0],    # blob B
        ])
        labels = ev.constrained_kmeans(points, 2, [0, 2], [1, 0], seed=1)
        np.testing.assert_array_equal(labels, [1, 1, 0, 0])

    def test_anchor_cluster_out_of_range(self):
        with pytest.raises(ContractViolation):
            ev.constrained_kmeans(np.zeros((4, 2)), 2, [0], [5], seed=0)


class TestSilhouette:
    def test_two_separated_pairs_reference_value(self):
        points = np.array([[0.0, 0.0], [0.0, 1.0], [10.0, 0.0], [10.0, 1.0]])
        labels = np.array([0, 0, 1, 1])
        # Reference: a = 1; b = (10 + sqrt(101)) / 2 for every point.
        b = (10.0 + np.sqrt(101.0)) / 2.0
        expected = (b - 1.0) / b
        assert ev.silhouette(points, labels) == pytest.approx(expected, rel=1e-12)
        assert expected == pytest.approx(0.90, abs=0.005)

    def test_coincident_clusters_not_positive(self):
        rng = np.random.default_rng(9)
        blob = rng.normal(size=(20, 2))
        points = np.vstack([blob, blob])
        labels = np.array([0] * 20 + [1] * 20)
        assert ev.silhouette(points, labels) <= 0.05

    def test_singleton_cluster_contributes_zero(self):
        points = np.array([[0.0, 0.0], [0.0, 0.1], [5.0, 5.0]])
        labels = np.array([0, 0, 1])
        value = ev.silhouette(points, labels)
        per_point = []
        for i in (0, 1):
            a = np.linalg.norm(points[i] - points[1 - i])
            b = np.linalg.norm(points[i] - points[2])
            per_point.append((b - a) / max(a, b))
        expected = (per_point[0] + per_point[1] + 0.0) / 3.0
        assert value == pytest.approx(expected, rel=1e-12)

    def test_single_cluster_rejected(self):
        with pytest.raises(ContractViolation):
            ev.silhouette(np.zeros((3, 2)), [0, 0, 0])


class TestSpectralCluster:
    def test_two_cliques_recovered(self):
        edges = [(i, j) for i in range(5) for j in range(i + 1, 5)]
        edges += [(i + 5, j + 5) for i in range(5) for j in range(i + 1, 5)]
        labels_true = np.array([0] * 5 + [1] * 5)
        graph = gd.make_graph(np.zeros((10, 1)), edges, labels_true, 2)
        labels = ev.spectral_cluster(graph, 2, seed=0)
        assert ev.matched_accuracy(labels, labels_true, np.arange(10)) == 1.0

    def test_k_one_single_label(self):
        graph = gd.make_graph(np.zeros((4, 1)), [(0, 1), (2, 3)], [0] * 4, 1)
        labels = ev.spectral_cluster(graph, 1, seed=0)
        np.testing.assert_array_equal(labels, 0)

    def test_components_equal_clusters_property(self):
        # Three disconnected triangles, k = 3 -> exact component recovery.
        edges = []
        for base in (0, 3, 6):
            edges += [(base, base + 1), (base + 1, base + 2), (base, base + 2)]
        truth = np.repeat([0, 1, 2], 3)
        graph = gd.make_graph(np.zeros((9, 1)), edges, truth, 3)
        labels = ev.spectral_cluster(graph, 3, seed=1)
        assert ev.matched_accuracy(labels, truth, np.arange(9)) == 1.0

    def test_dense_limit_enforced(self):
        import scipy.sparse as sp

        class Dummy:
            adjacency = sp.eye(ev.DENSE_EIG_LIMIT + 1, format="csr")

        with pytest.raises(CapabilityError):
            ev.spectral_cluster(Dummy(), 2, seed=0)


class TestEstimateNumClasses:
    def _blobs(self, per_class, num_classes, spread, seed):
        rng = np.random.default_rng(seed)
        centers = np.eye(num_classes) * 6.0
        labels = np.repeat(np.arange(num_classes), per_class)
        points = centers[labels] + spread * rng.normal(
            size=(per_class * num_classes, num_classes))
        return points, labels

    def test_four_separated_blobs(self):
        points, labels = self._blobs(40, 4, 0.4, seed=10)
        anchors = np.concatenate([np.flatnonzero(labels == c)[:10]
                                  for c in (0, 1)])
        validators = np.concatenate([np.flatnonzero(labels == c)[10:20]
                                     for c in (0, 1)])
        used = np.union1d(anchors, validators)
        unlabeled = np.setdiff1d(np.arange(len(labels)), used)
        estimate = ev.estimate_num_classes(points, anchors, labels[anchors],
                                           validators, labels[validators],
                                           unlabeled, k_max=10, seed=0)
        assert 3 <= estimate <= 5

    def test_k_max_below_anchor_classes_rejected(self):
        points, labels = self._blobs(10, 4, 0.3, seed=11)
        anchors = np.arange(0, 40, 5)
        with pytest.raises(ContractViolation):
            ev.estimate_num_classes(points, anchors, labels[anchors],
                                    anchors, labels[anchors],
                                    np.arange(40), k_max=2, seed=0)

    def test_estimate_bounded_by_k_max(self):
        points, labels = self._blobs(25, 4, 0.5, seed=12)
        anchors = np.concatenate([np.flatnonzero(labels == c)[:8]
                                  for c in (0, 1)])
        validators = np.concatenate([np.flatnonzero(labels == c)[8:16]
                                     for c in (0, 1)])
        unlabeled = np.setdiff1d(np.arange(len(labels)),
                                 np.union1d(anchors, validators))
        estimate = ev.estimate_num_classes(points, anchors, labels[anchors],
                                           validators, labels[validators],
                                           unlabeled, k_max=4, seed=1)
        assert estimate <= 4
