"""Eval-split analytics: accuracy histogram, confusion matrices, per-instance
concept influence, concept presence, and the influence-matrix orderings."""

from dataclasses import dataclass

import numpy as np

from .discovery import ConceptRecord, embed_patches, pool_embeddings
from .errors import ParameterError
from .model import ModelGraph, Prediction, forward, gradient_from_activation
from .segmentation import Segment, extract_segments, segment_to_patch
from .tcav import InfluenceSample


@dataclass
class ConfusionMatrix:
    class_subset: list[int]
    counts: np.ndarray  # (n, n + 1) ints; last column is "other"
    cell_instances: list[list[list[str]]]  # [row][col] -> instance ids, confidence-descending


@dataclass
class InstanceInfluenceRow:
    instance_id: str
    concept_id: str
    influence: float  # fraction of the concept's CAVs voting positive


@dataclass
class ConceptPresence:
    instance_id: str
    concept_id: str
    matching_segment_ids: list[str]

    @property
    def present(self) -> bool:
        return bool(self.matching_segment_ids)


def per_class_accuracy(
    predictions: list[Prediction], labels: dict[str, int]
) -> dict[int, float]:
    totals: dict[int, int] = {}
    correct: dict[int, int] = {}
    for pred in predictions:
        k = labels[pred.instance_id]
        totals[k] = totals.get(k, 0) + 1
        if pred.predicted_class == k:
            correct[k] = correct.get(k, 0) + 1
    return {k: correct.get(k, 0) / totals[k] for k in totals}


def accuracy_histogram(
    predictions: list[Prediction],
    labels: dict[str, int],
    n_classes: int,
    n_bins: int = 10,
) -> tuple[np.ndarray, dict[int, float], list[int]]:
    """Histogram of per-class eval accuracies over [0, 1] with equal-width
    bins; accuracy 1.0 lands in the last bin. Classes with no eval
    instances are excluded and reported."""
    accuracy = per_class_accuracy(predictions, labels)
    if not accuracy:
        raise ParameterError("no class has eval instances")
    excluded = [k for k in range(n_classes) if k not in accuracy]
    bins = np.zeros(n_bins, dtype=np.int64)
    for acc in accuracy.values():
        idx = min(int(acc * n_bins), n_bins - 1)
        bins[idx] += 1
    return bins, accuracy, excluded


def confusion(
    predictions: list[Prediction], labels: dict[str, int], class_subset: list[int]
) -> ConfusionMatrix:
    """Counts over (true, predicted) pairs for eval instances whose true
    label is in the subset; predictions outside the subset fall into a
    trailing "other" column."""
    if not class_subset:
        raise ParameterError("class subset must be non-empty")
    subset = list(class_subset)
    col_of = {k: i for i, k in enumerate(subset)}
    other = len(subset)
    counts = np.zeros((len(subset), len(subset) + 1), dtype=np.int64)
    members: list[list[list[tuple[float, str]]]] = [
        [[] for _ in range(len(subset) + 1)] for _ in subset
    ]
    for pred in predictions:
        true_k = labels[pred.instance_id]
        if true_k not in col_of:
            continue
        row = col_of[true_k]
        col = col_of.get(pred.predicted_class, other)
        counts[row, col] += 1
        members[row][col].append((-pred.confidence, pred.instance_id))
    cell_instances = [
        [[iid for _, iid in sorted(cell)] for cell in row_cells] for row_cells in members
    ]
    return ConfusionMatrix(class_subset=subset, counts=counts, cell_instances=cell_instances)


def instance_influence(
    model: ModelGraph,
    image: np.ndarray,
    instance_id: str,
    concept: ConceptRecord,
    layer: str,
) -> tuple[InstanceInfluenceRow, list[InfluenceSample]]:
    """CAV vote fraction for one (instance, concept) pair, with every
    directional derivative recorded. Uses the concept's own class logit."""
    cavs = [c for c in concept.cavs if c is not None]
    if not cavs:
        raise ParameterError(f"concept '{concept.concept_id}' has no trained CAVs")
    _, activation = forward(model, image, layer)
    grad = gradient_from_activation(model, layer, activation, concept.class_k).ravel()
    samples = []
    votes = 0
    for idx, cav in enumerate(concept.cavs):
        if cav is None:
            continue
        s = float(grad @ cav.weight)
        samples.append(
            InfluenceSample(
                instance_id=instance_id, concept_id=concept.concept_id, cav_index=idx, s_value=s
            )
        )
        votes += int(s > 0)
    row = InstanceInfluenceRow(
        instance_id=instance_id, concept_id=concept.concept_id, influence=votes / len(cavs)
    )
    return row, samples


def order_instances(
    predictions: list[Prediction], labels: dict[str, int]
) -> list[str]:
    """Correct instances first, confidence descending; then misclassified,
    confidence ascending; instance id breaks ties."""
    correct = [p for p in predictions if p.predicted_class == labels[p.instance_id]]
    wrong = [p for p in predictions if p.predicted_class != labels[p.instance_id]]
    correct.sort(key=lambda p: (-p.confidence, p.instance_id))
    wrong.sort(key=lambda p: (p.confidence, p.instance_id))
    return [p.instance_id for p in correct] + [p.instance_id for p in wrong]


def concept_presence(
    model: ModelGraph,
    image: np.ndarray,
    instance_id: str,
    concepts: list[ConceptRecord],
    layer: str,
    resolutions: list[int],
    channel_means: np.ndarray,
    seed: int = 0,
    pooling: str = "flatten",
) -> tuple[list[ConceptPresence], list[Segment]]:
    """Segment the instance, embed each segment, and assign it to every
    concept whose centroid lies within that concept's membership radius.

    ``pooling`` must match the discovery run that produced the concepts."""
    if not concepts:
        return [], []
    segments = extract_segments(image, instance_id, resolutions, seed=seed)
    if not segments:
        return [
            ConceptPresence(instance_id=instance_id, concept_id=c.concept_id, matching_segment_ids=[])
            for c in concepts
        ], []
    patches = [
        segment_to_patch(image, seg, channel_means, model.input_shape) for seg in segments
    ]
    flat = embed_patches(model, patches, layer)
    embeddings = pool_embeddings(flat, model.layer_output_shape(layer), pooling).astype(
        np.float64
    )
    matches: dict[str, list[str]] = {c.concept_id: [] for c in concepts}
    for concept in concepts:
        dist = np.linalg.norm(embeddings - concept.centroid[None, :], axis=1)
        for seg, d in zip(segments, dist):
            if d <= concept.radius:
                matches[concept.concept_id].append(seg.segment_id)
    presences = [
        ConceptPresence(
            instance_id=instance_id,
            concept_id=c.concept_id,
            matching_segment_ids=matches[c.concept_id],
        )
        for c in concepts
    ]
    return presences, segments


def box_stats(values: list[float]) -> dict[str, float]:
    """min / Q1 / median / Q3 / max with linear-interpolation quantiles;
    whiskers are the extremes (no outlier fencing)."""
    arr = np.asarray(values, dtype=np.float64)
    q1, med, q3 = np.quantile(arr, [0.25, 0.5, 0.75], method="linear")
    return {
        "min": float(arr.min()),
        "q1": float(q1),
        "median": float(med),
        "q3": float(q3),
        "max": float(arr.max()),
    }


def class_concept_summary(
    class_k: int,
    selection_concepts: list[ConceptRecord],
    n_bins: int = 10,
) -> dict:
    """Card data for one class against the current class selection.

    The histogram covers the class's own concept scores; rows group the
    class's concepts by cluster, ordered by how frequent the cluster is
    across the whole selection; box stats summarize each row's scores over
    the selection.
    """
    own = [c for c in selection_concepts if c.class_k == class_k]
    if not own:
        raise ParameterError(f"class {class_k} has no retained concepts")

    bins = np.zeros(n_bins, dtype=np.int64)
    for concept in own:
        idx = min(int(concept.tcav.mean_score * n_bins), n_bins - 1)
        bins[idx] += 1

    freq: dict[str, int] = {}
    scores_by_cluster: dict[str, list[float]] = {}
    for concept in selection_concepts:
        cid = concept.cluster_id or "unclustered"
        freq[cid] = freq.get(cid, 0) + 1
        scores_by_cluster.setdefault(cid, []).append(concept.tcav.mean_score)

    own_clusters = sorted(
        {c.cluster_id or "unclustered" for c in own}, key=lambda cid: (-freq[cid], cid)
    )
    rows = []
    for cid in own_clusters:
        rows.append(
            {
                "cluster_id": cid,
                "concepts": [
                    {"concept_id": c.concept_id, "mean_score": c.tcav.mean_score}
                    for c in sorted(own, key=lambda c: c.concept_id)
                    if (c.cluster_id or "unclustered") == cid
                ],
                "frequency": freq[cid],
                "box": box_stats(scores_by_cluster[cid]),
            }
        )
    return {"class_k": class_k, "histogram": bins.tolist(), "rows": rows}
