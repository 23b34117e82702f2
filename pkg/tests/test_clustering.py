import itertools

import numpy as np
import pytest

from concept_probe.clustering import (
    ClusteringConfig,
    cluster_concepts,
    concept_similarity,
    default_k_range,
    select_cluster_count,
    silhouette_score,
    ward_agglomerate,
)
from concept_probe.discovery import ConceptRecord
from concept_probe.errors import ParameterError


def make_concept(cid, class_k, centroid):
    return ConceptRecord(
        concept_id=cid,
        class_k=class_k,
        display_name=cid,
        member_segment_ids=[f"{cid}.s{i}" for i in range(10)],
        member_instance_ids=[f"{cid}.i{i % 3}" for i in range(10)],
        centroid=np.asarray(centroid, dtype=np.float64),
        radius=1.0,
    )


def within_sse(vectors, assignment):
    total = 0.0
    for label in set(assignment):
        members = vectors[[i for i, a in enumerate(assignment) if a == label]]
        total += ((members - members.mean(axis=0)) ** 2).sum()
    return total


class TestWard:
    def test_two_tight_pairs(self):
        """Brute force over all 2-partitions of 4 points: the Ward cut must
        achieve the minimum within-cluster squared error."""
        vectors = np.array([[0.0, 0], [0.1, 0], [5.0, 5], [5.1, 5]])
        assignment, costs = ward_agglomerate(vectors, 2)
        best = None
        for labels in itertools.product([0, 1], repeat=4):
            if len(set(labels)) != 2:
                continue
            best = min(best, within_sse(vectors, labels)) if best is not None else within_sse(
                vectors, labels
            )
        assert within_sse(vectors, assignment.tolist()) == pytest.approx(best, abs=1e-12)
        assert assignment[0] == assignment[1] and assignment[2] == assignment[3]
        assert assignment[0] != assignment[2]

    def test_merge_costs_non_decreasing(self):
        rng = np.random.default_rng(0)
        vectors = rng.random((20, 4))
        _, costs = ward_agglomerate(vectors, 1)
        assert all(b >= a - 1e-12 for a, b in zip(costs, costs[1:]))

    def test_bounds(self):
        with pytest.raises(ParameterError):
            ward_agglomerate(np.zeros((3, 2)), 4)


class TestClusterConcepts:
    def _concepts(self):
        return [
            make_concept("a_concept_1", 0, [0, 0]),
            make_concept("a_concept_2", 0, [0.2, 0]),
            make_concept("b_concept_1", 1, [0.1, 0.1]),
            make_concept("b_concept_2", 1, [10, 10]),
            make_concept("c_concept_1", 2, [10.2, 10]),
        ]

    def test_shared_motif_lands_together(self):
        concepts = self._concepts()
        clusters = cluster_concepts(concepts, ClusteringConfig(method="agglomerative", n_clusters=2))
        by_id = {c.concept_id: c.cluster_id for c in concepts}
        assert by_id["a_concept_1"] == by_id["b_concept_1"]
        assert by_id["b_concept_2"] == by_id["c_concept_1"]
        assert by_id["a_concept_1"] != by_id["b_concept_2"]

    def test_singletons_at_full_k(self):
        concepts = self._concepts()
        clusters = cluster_concepts(
            concepts, ClusteringConfig(method="agglomerative", n_clusters=5)
        )
        assert len(clusters) == 5
        assert all(len(cl.member_concept_ids) == 1 for cl in clusters)

    def test_partition_and_naming(self):
        concepts = self._concepts()
        clusters = cluster_concepts(concepts, ClusteringConfig(method="kmeans", n_clusters=2, seed=3))
        covered = [cid for cl in clusters for cid in cl.member_concept_ids]
        assert sorted(covered) == sorted(c.concept_id for c in concepts)
        sizes = [len(cl.member_concept_ids) for cl in clusters]
        assert sizes == sorted(sizes, reverse=True)
        assert [cl.cluster_id for cl in clusters] == [f"CC{i}" for i in range(1, len(clusters) + 1)]

    def test_medoid_minimizes_summed_distance(self):
        concepts = self._concepts()
        clusters = cluster_concepts(
            concepts, ClusteringConfig(method="agglomerative", n_clusters=2)
        )
        by_id = {c.concept_id: c for c in concepts}
        for cl in clusters:
            vectors = np.stack([by_id[cid].centroid for cid in cl.member_concept_ids])
            sums = np.linalg.norm(vectors[:, None] - vectors[None], axis=2).sum(axis=1)
            expected = cl.member_concept_ids[int(np.argmin(sums))]
            assert cl.medoid_concept_id == expected

    def test_too_many_clusters(self):
        with pytest.raises(ParameterError):
            cluster_concepts(self._concepts(), ClusteringConfig(method="kmeans", n_clusters=6))

    def test_config_validation(self):
        with pytest.raises(ParameterError):
            ClusteringConfig(method="spectral")
        with pytest.raises(ParameterError):
            ClusteringConfig(method="kmeans", n_clusters=1)


class TestSilhouette:
    def silhouette_oracle(self, vectors, assignment):
        """Direct formula evaluation, written independently of the library."""
        n = len(vectors)
        values = []
        for i in range(n):
            own = [j for j in range(n) if assignment[j] == assignment[i] and j != i]
            if not own:
                values.append(0.0)
                continue
            a = np.mean([np.linalg.norm(vectors[i] - vectors[j]) for j in own])
            b = min(
                np.mean(
                    [np.linalg.norm(vectors[i] - vectors[j]) for j in range(n) if assignment[j] == lab]
                )
                for lab in set(assignment)
                if lab != assignment[i]
            )
            values.append(0.0 if max(a, b) == 0 else (b - a) / max(a, b))
        return float(np.mean(values))

    def test_two_far_blobs(self):
        rng = np.random.default_rng(1)
        vectors = np.concatenate(
            [rng.normal(0, 0.1, size=(15, 3)), rng.normal(8, 0.1, size=(15, 3))]
        )
        labels = np.array([0] * 15 + [1] * 15)
        score = silhouette_score(vectors, labels)
        assert score > 0.9
        assert score == pytest.approx(self.silhouette_oracle(vectors, labels), abs=1e-9)

    def test_random_labels_near_zero(self):
        rng = np.random.default_rng(2)
        vectors = rng.random((40, 3))
        scores = []
        for _ in range(100):
            labels = rng.integers(0, 2, size=40)
            if len(set(labels.tolist())) < 2:
                continue
            scores.append(silhouette_score(vectors, labels))
        assert abs(np.mean(scores)) < 0.1

    def test_equidistant_point_contributes_zero(self):
        vectors = np.array([[0.0], [2.0], [1.0]])
        labels = np.array([0, 0, 1])
        # point 2 (singleton cluster) contributes 0 by definition; points 0/1
        # have a = 2, b = 1 -> (1-2)/2 = -0.5 each
        assert silhouette_score(vectors, labels) == pytest.approx((-0.5 - 0.5 + 0.0) / 3)

    def test_single_cluster_undefined(self):
        with pytest.raises(ParameterError):
            silhouette_score(np.zeros((4, 2)), np.zeros(4, dtype=int))

    def test_range(self):
        rng = np.random.default_rng(3)
        for _ in range(10):
            vectors = rng.random((12, 2))
            labels = rng.integers(0, 3, size=12)
            if len(set(labels.tolist())) < 2:
                continue
            assert -1.0 <= silhouette_score(vectors, labels) <= 1.0


class TestSelectClusterCount:
    def test_three_groups(self):
        rng = np.random.default_rng(4)
        vectors = np.concatenate(
            [rng.normal(center, 0.1, size=(8, 2)) for center in ((0, 0), (6, 0), (0, 6))]
        )
        best, scores = select_cluster_count(vectors, "kmeans", range(2, 9), seed=5)
        assert best == 3
        assert set(scores) == set(range(2, 9))

    def test_tie_prefers_smaller_k(self):
        # four corners of a square: k=2 and k=4 tie in structure, the rule
        # must break toward the smaller k whenever scores are equal
        vectors = np.array([[0.0, 0], [0, 1], [10, 0], [10, 1]])
        best, scores = select_cluster_count(vectors, "agglomerative", [2, 2], seed=0)
        assert best == 2

    def test_single_k_range(self):
        rng = np.random.default_rng(5)
        vectors = rng.random((10, 2))
        best, scores = select_cluster_count(vectors, "kmeans", [2], seed=0)
        assert best == 2 and list(scores) == [2]

    def test_empty_range(self):
        with pytest.raises(ParameterError):
            select_cluster_count(np.zeros((5, 2)), "kmeans", [], seed=0)

    def test_out_of_bounds_range(self):
        with pytest.raises(ParameterError):
            select_cluster_count(np.zeros((5, 2)), "kmeans", [2, 5], seed=0)

    def test_default_range(self):
        assert list(default_k_range(10)) == list(range(2, 10))
        assert list(default_k_range(100)) == list(range(2, 31))


class TestSimilarity:
    def test_reflexive_symmetric(self):
        concepts = [
            make_concept("x_concept_1", 0, [0, 0]),
            make_concept("y_concept_1", 1, [0.1, 0]),
            make_concept("z_concept_1", 2, [9, 9]),
        ]
        clusters = cluster_concepts(
            concepts, ClusteringConfig(method="agglomerative", n_clusters=2)
        )
        a, b, c = concepts
        assert concept_similarity(a, a, clusters) == 1
        assert concept_similarity(a, b, clusters) == concept_similarity(b, a, clusters) == 1
        assert concept_similarity(a, c, clusters) == 0

    def test_unassigned_lookup_error(self):
        concepts = [make_concept("q_concept_1", 0, [0, 0])]
        with pytest.raises(ParameterError):
            concept_similarity(concepts[0], concepts[0], [])
