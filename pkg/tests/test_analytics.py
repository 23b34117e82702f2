import numpy as np
import pytest

from concept_probe.analytics import (
    accuracy_histogram,
    box_stats,
    class_concept_summary,
    concept_presence,
    confusion,
    instance_influence,
    order_instances,
)
from concept_probe.discovery import ConceptRecord
from concept_probe.errors import ParameterError
from concept_probe.model import Prediction
from concept_probe.tcav import Cav, TcavStats


def pred(iid, k, confidence):
    probs = np.full(3, (1 - confidence) / 2)
    probs[k] = confidence
    return Prediction(
        instance_id=iid,
        logits=np.log(probs + 1e-9),
        probabilities=probs,
        predicted_class=k,
        confidence=confidence,
    )


class TestAccuracyHistogram:
    def test_all_correct_last_bin(self):
        preds = [pred(f"i{j}", j % 2, 0.9) for j in range(10)]
        labels = {p.instance_id: p.predicted_class for p in preds}
        bins, accuracy, excluded = accuracy_histogram(preds, labels, n_classes=2, n_bins=10)
        assert bins[-1] == 2 and bins[:-1].sum() == 0
        assert excluded == []

    def test_boundary_bin(self):
        # exactly 1.0 accuracy must land inside the last bin
        preds = [pred("a", 0, 0.8)]
        bins, accuracy, _ = accuracy_histogram(preds, {"a": 0}, n_classes=1, n_bins=10)
        assert accuracy[0] == 1.0
        assert bins[9] == 1

    def test_recount_oracle(self):
        rng = np.random.default_rng(0)
        preds, labels = [], {}
        for j in range(60):
            true_k = int(rng.integers(3))
            predicted = int(rng.integers(3))
            p = pred(f"i{j}", predicted, 0.5 + 0.4 * rng.random())
            preds.append(p)
            labels[p.instance_id] = true_k
        bins, accuracy, _ = accuracy_histogram(preds, labels, n_classes=3, n_bins=10)
        for k in range(3):
            mine = [p for p in preds if labels[p.instance_id] == k]
            oracle = sum(1 for p in mine if p.predicted_class == k) / len(mine)
            assert accuracy[k] == pytest.approx(oracle)
        assert bins.sum() == 3

    def test_empty_class_excluded(self):
        preds = [pred("a", 0, 0.9)]
        bins, accuracy, excluded = accuracy_histogram(preds, {"a": 0}, n_classes=3)
        assert excluded == [1, 2]


class TestConfusion:
    def test_perfect_diagonal(self):
        preds = [pred(f"i{j}", j % 3, 0.9) for j in range(9)]
        labels = {p.instance_id: p.predicted_class for p in preds}
        matrix = confusion(preds, labels, [0, 1, 2])
        np.testing.assert_array_equal(matrix.counts[:, :3], np.eye(3, dtype=int) * 3)
        assert matrix.counts[:, 3].sum() == 0

    def test_always_predicts_one_class(self):
        preds = [pred(f"i{j}", 0, 0.9) for j in range(6)]
        labels = {f"i{j}": j % 2 for j in range(6)}
        matrix = confusion(preds, labels, [0, 1])
        assert matrix.counts[:, 0].sum() == 6
        assert matrix.counts[:, 1].sum() == 0

    def test_other_column_and_totals(self):
        preds = [pred("a", 2, 0.9), pred("b", 0, 0.8)]
        labels = {"a": 0, "b": 1}
        matrix = confusion(preds, labels, [0, 1])
        assert matrix.counts[0, 2] == 1  # class-0 instance predicted outside subset
        assert matrix.counts[1, 0] == 1
        assert matrix.counts.sum() == 2

    def test_cells_sorted_by_confidence(self):
        preds = [pred("lo", 0, 0.6), pred("hi", 0, 0.95), pred("mid", 0, 0.7)]
        labels = {p.instance_id: 0 for p in preds}
        matrix = confusion(preds, labels, [0])
        assert matrix.cell_instances[0][0] == ["hi", "mid", "lo"]

    def test_empty_subset(self):
        with pytest.raises(ParameterError):
            confusion([], {}, [])


class TestOrderInstances:
    def test_spec_example(self):
        preds = [
            pred("c1", 0, 0.9),
            pred("c2", 0, 0.7),
            pred("w1", 1, 0.6),
            pred("w2", 1, 0.95),
        ]
        labels = {"c1": 0, "c2": 0, "w1": 0, "w2": 0}
        assert order_instances(preds, labels) == ["c1", "c2", "w1", "w2"]

    def test_all_correct_descending(self):
        preds = [pred(f"i{j}", 0, 0.5 + 0.05 * j) for j in range(5)]
        labels = {p.instance_id: 0 for p in preds}
        assert order_instances(preds, labels) == ["i4", "i3", "i2", "i1", "i0"]

    def test_ties_break_by_id(self):
        preds = [pred("b", 0, 0.5), pred("a", 0, 0.5)]
        labels = {"a": 0, "b": 0}
        assert order_instances(preds, labels) == ["a", "b"]

    def test_permutation(self):
        rng = np.random.default_rng(1)
        preds = [pred(f"i{j}", int(rng.integers(2)), float(rng.random())) for j in range(20)]
        labels = {p.instance_id: int(rng.integers(2)) for p in preds}
        ordered = order_instances(preds, labels)
        assert sorted(ordered) == sorted(p.instance_id for p in preds)


class TestInstanceInfluence:
    def _concept_with_cavs(self, vectors):
        cavs = [
            Cav(weight=v / np.linalg.norm(v), bias=0.0, validation_accuracy=1.0, counterexample_seed=i)
            for i, v in enumerate(vectors)
        ]
        return ConceptRecord(
            concept_id="c_concept_1",
            class_k=0,
            display_name="c_concept_1",
            member_segment_ids=["s1"],
            member_instance_ids=["i1"],
            centroid=np.zeros(vectors.shape[1]),
            radius=1.0,
            tcav=TcavStats([0.9], 0.9, 0.001, True),
            cavs=cavs,
        )

    def test_all_positive_votes(self, fixture_model, fixture_manifest):
        from concept_probe.data import load_image
        from concept_probe.model import forward, gradient_from_activation

        inst = fixture_manifest.class_instances(0, "eval")[0]
        image = load_image(inst, fixture_manifest.image_shape)
        _, act = forward(fixture_model, image, "relu1")
        grad = gradient_from_activation(fixture_model, "relu1", act, 0).ravel()
        concept = self._concept_with_cavs(np.stack([grad, 2 * grad]))  # aligned with gradient
        row, samples = instance_influence(fixture_model, image, inst.instance_id, concept, "relu1")
        assert row.influence == 1.0
        assert len(samples) == 2
        assert all(s.positive for s in samples)

    def test_matrix_matches_exhaustive_enumeration(self, fixture_model, fixture_manifest):
        from concept_probe.data import load_image
        from concept_probe.model import gradient_at_layer

        rng = np.random.default_rng(2)
        dim = int(np.prod(fixture_model.layer_output_shape("relu1")))
        concept = self._concept_with_cavs(rng.normal(size=(20, dim)))
        instances = fixture_manifest.class_instances(0, "eval")[:4]
        for inst in instances:
            image = load_image(inst, fixture_manifest.image_shape)
            row, samples = instance_influence(
                fixture_model, image, inst.instance_id, concept, "relu1"
            )
            grad = gradient_at_layer(fixture_model, image, "relu1", 0).ravel()
            votes = sum(1 for cav in concept.cavs if float(grad @ cav.weight) > 0)
            assert row.influence == votes / 20
            assert len(samples) == 20
            assert 0.0 <= row.influence <= 1.0


class TestPresence:
    def test_discovery_members_re_identified(self, fixture_model, fixture_manifest):
        """Self-consistency: segments that formed a concept re-match it when
        the instance is re-segmented with the same seed."""
        from concept_probe.data import compute_channel_means, load_image
        from concept_probe.discovery import embed_patches, pool_embeddings
        from concept_probe.segmentation import extract_segments, segment_to_patch

        channel_means = compute_channel_means(fixture_manifest)
        inst = fixture_manifest.class_instances(0, "probe")[0]
        image = load_image(inst, fixture_manifest.image_shape)
        segments = extract_segments(image, inst.instance_id, [15, 50], seed=3)
        patches = [
            segment_to_patch(image, s, channel_means, fixture_model.input_shape) for s in segments
        ]
        flat = embed_patches(fixture_model, patches, "relu1")
        pooled = pool_embeddings(flat, fixture_model.layer_output_shape("relu1"), "gap").astype(
            np.float64
        )
        centroid = pooled.mean(axis=0)
        radius = float(np.linalg.norm(pooled - centroid, axis=1).max())
        concept = ConceptRecord(
            concept_id="x_concept_1",
            class_k=0,
            display_name="x_concept_1",
            member_segment_ids=[s.segment_id for s in segments],
            member_instance_ids=[inst.instance_id] * len(segments),
            centroid=centroid,
            radius=radius,
            tcav=None,
            cavs=[],
        )
        presences, found_segments = concept_presence(
            fixture_model,
            image,
            inst.instance_id,
            [concept],
            "relu1",
            [15, 50],
            channel_means,
            seed=3,
            pooling="gap",
        )
        assert presences[0].present
        assert set(concept.member_segment_ids) <= set(presences[0].matching_segment_ids)

    def test_empty_concept_list(self, fixture_model, fixture_manifest):
        from concept_probe.data import compute_channel_means, load_image

        inst = fixture_manifest.instances[0]
        image = load_image(inst, fixture_manifest.image_shape)
        presences, segments = concept_presence(
            fixture_model, image, inst.instance_id, [], "relu1", [15], np.full(3, 0.5)
        )
        assert presences == [] and segments == []


class TestSummary:
    def test_quantile_formula(self):
        stats = box_stats([0.2, 0.4, 0.6, 0.8])
        assert stats["q1"] == pytest.approx(0.35)
        assert stats["median"] == pytest.approx(0.5)
        assert stats["q3"] == pytest.approx(0.65)
        assert stats["min"] == 0.2 and stats["max"] == 0.8

    def _concept(self, cid, class_k, score, cluster):
        return ConceptRecord(
            concept_id=cid,
            class_k=class_k,
            display_name=cid,
            member_segment_ids=["s"],
            member_instance_ids=["i"],
            centroid=np.zeros(2),
            radius=1.0,
            tcav=TcavStats([score], score, 0.001, True),
            cavs=[],
            cluster_id=cluster,
        )

    def test_single_concept_degenerate(self):
        summary = class_concept_summary(0, [self._concept("a_concept_1", 0, 0.8, "CC1")])
        assert sum(summary["histogram"]) == 1
        assert summary["histogram"][8] == 1
        assert len(summary["rows"]) == 1
        box = summary["rows"][0]["box"]
        assert box["min"] == box["max"] == 0.8

    def test_frequency_across_selection(self):
        concepts = [
            self._concept("a_concept_1", 0, 0.9, "CC1"),
            self._concept("a_concept_2", 0, 0.2, "CC2"),
            self._concept("b_concept_1", 1, 0.8, "CC1"),
            self._concept("b_concept_2", 1, 0.7, "CC1"),
        ]
        summary = class_concept_summary(0, concepts)
        rows = {r["cluster_id"]: r for r in summary["rows"]}
        assert rows["CC1"]["frequency"] == 3  # counted across both classes
        assert rows["CC2"]["frequency"] == 1
        assert [r["cluster_id"] for r in summary["rows"]] == ["CC1", "CC2"]

    def test_no_concepts_error(self):
        with pytest.raises(ParameterError):
            class_concept_summary(0, [])
