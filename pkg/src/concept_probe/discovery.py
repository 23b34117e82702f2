"""Concept discovery: embed segment patches at a target layer and cluster
them per class into candidate concepts."""

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ParameterError
from .model import ModelGraph, forward_batch
from .seeding import derived_rng
from .segmentation import Patch

KEEP_FRACTION = 0.9
MIN_CONCEPT_SIZE = 10
MIN_DISTINCT_IMAGES = 3


@dataclass
class KMeansResult:
    assignments: np.ndarray  # (n,) int
    centroids: np.ndarray  # (k, d) float64
    inertia: float
    inertia_history: list[float] = field(default_factory=list)


@dataclass
class ConceptRecord:
    concept_id: str
    class_k: int
    display_name: str
    member_segment_ids: list[str]
    member_instance_ids: list[str]
    centroid: np.ndarray  # float64 (d,)
    radius: float  # max member-to-centroid distance after trimming
    tcav: "object | None" = None  # TcavStats once scored
    cavs: list = field(default_factory=list)
    cluster_id: str | None = None

    @property
    def size(self) -> int:
        return len(self.member_segment_ids)


def embed_patches(
    model: ModelGraph, patches: list[Patch], layer: str, batch_size: int = 256
) -> np.ndarray:
    """One flattened activation vector per patch, float32 (n, d)."""
    if not patches:
        d = int(np.prod(model.layer_output_shape(layer)))
        return np.zeros((0, d), dtype=np.float32)
    out = []
    for start in range(0, len(patches), batch_size):
        chunk = np.stack([p.pixels for p in patches[start : start + batch_size]])
        _, acts = forward_batch(model, chunk, layer)
        out.append(acts.reshape(acts.shape[0], -1).astype(np.float32))
    return np.concatenate(out, axis=0)


def pool_embeddings(
    flat: np.ndarray, layer_shape: tuple[int, ...], pooling: str
) -> np.ndarray:
    """Clustering view of the embeddings: either the flattened map itself or
    its per-channel spatial mean. CAVs always train on the flattened form,
    whose dimensionality matches the layer gradients."""
    if pooling == "flatten":
        return flat
    if pooling != "gap":
        raise ParameterError(f"unknown pooling '{pooling}'")
    if len(layer_shape) != 3:
        return flat  # a flat layer has no spatial extent to pool
    h, w, c = layer_shape
    return flat.reshape(len(flat), h * w, c).mean(axis=1)


def _pairwise_sq(vectors: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """(n, k) squared distances without materializing (n, k, d)."""
    v2 = (vectors**2).sum(axis=1)
    c2 = (centroids**2).sum(axis=1)
    d2 = v2[:, None] + c2[None, :] - 2.0 * (vectors @ centroids.T)
    return np.maximum(d2, 0.0)


def _plusplus_init(vectors: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(vectors)
    centroids = np.empty((k, vectors.shape[1]))
    first = int(rng.integers(n))
    centroids[0] = vectors[first]
    d2 = ((vectors - centroids[0]) ** 2).sum(axis=1)
    for i in range(1, k):
        total = d2.sum()
        if total <= 0:
            # all remaining mass at distance zero: duplicate points
            idx = int(rng.integers(n))
        else:
            r = rng.random() * total
            idx = int(np.searchsorted(np.cumsum(d2), r))
            idx = min(idx, n - 1)
        centroids[i] = vectors[idx]
        d2 = np.minimum(d2, ((vectors - centroids[i]) ** 2).sum(axis=1))
    return centroids


def kmeans(
    vectors: np.ndarray, k: int, seed: int, max_iterations: int = 100
) -> KMeansResult:
    """Lloyd iterations from a k-means++ start until the assignment reaches
    a fixpoint. Empty clusters are re-seeded at the point farthest from
    their stale centroid."""
    vectors = np.asarray(vectors, dtype=np.float64)
    n = len(vectors)
    if k < 1:
        raise ParameterError("k must be >= 1")
    if k > n:
        raise ParameterError(f"k={k} exceeds the number of vectors ({n})")
    rng = derived_rng("kmeans", seed, n, k)
    centroids = _plusplus_init(vectors, k, rng)

    def direct_inertia(assign: np.ndarray) -> float:
        return float(((vectors - centroids[assign]) ** 2).sum())

    def reseed_empty(assign: np.ndarray, d2: np.ndarray) -> None:
        """Each empty cluster claims the point farthest from its (stale)
        centroid; a point can be claimed once per pass and never drains a
        cluster down to nothing."""
        claimed: set[int] = set()
        for c in range(k):
            if (assign == c).any():
                continue
            counts = np.bincount(assign, minlength=k)
            order = np.argsort(-d2[:, c], kind="stable")
            for far in order:
                far = int(far)
                if far in claimed or counts[assign[far]] <= 1:
                    continue
                centroids[c] = vectors[far]
                assign[far] = c
                claimed.add(far)
                break

    assignments = np.full(n, -1, dtype=np.int64)
    history: list[float] = []
    for _ in range(max_iterations):
        d2 = _pairwise_sq(vectors, centroids)
        new_assign = d2.argmin(axis=1)
        reseed_empty(new_assign, d2)
        history.append(direct_inertia(new_assign))
        if (new_assign == assignments).all():
            assignments = new_assign
            break
        assignments = new_assign
        for c in range(k):
            member = assignments == c
            if member.any():
                centroids[c] = vectors[member].mean(axis=0)

    return KMeansResult(
        assignments=assignments,
        centroids=centroids,
        inertia=direct_inertia(assignments),
        inertia_history=history,
    )


def discover_concepts(
    class_k: int,
    class_name: str,
    embeddings: np.ndarray,
    segment_ids: list[str],
    instance_ids: list[str],
    k_concepts: int,
    seed: int,
    keep_fraction: float = KEEP_FRACTION,
    min_concept_size: int = MIN_CONCEPT_SIZE,
    min_distinct_images: int = MIN_DISTINCT_IMAGES,
) -> tuple[list[ConceptRecord], list[str]]:
    """Cluster one class's patch embeddings into candidate concepts.

    Per cluster, only the ``keep_fraction`` of members nearest the centroid
    are kept; clusters that end up too small or too concentrated in too few
    source images are dropped. Survivors are ordered by size, largest first,
    and named `{class}_concept_{rank}`.
    """
    warnings: list[str] = []
    n = len(embeddings)
    if n == 0:
        return [], [f"class {class_name}: no embeddings to cluster"]
    k = k_concepts
    if n < k_concepts:
        k = n
        warnings.append(f"class {class_name}: only {n} embeddings, k reduced from {k_concepts} to {k}")

    result = kmeans(embeddings, k, seed)
    vectors = np.asarray(embeddings, dtype=np.float64)

    candidates = []
    for c in range(k):
        member_idx = np.nonzero(result.assignments == c)[0]
        if len(member_idx) == 0:
            continue
        dists = np.linalg.norm(vectors[member_idx] - result.centroids[c], axis=1)
        keep_n = max(1, int(math.ceil(keep_fraction * len(member_idx))))
        keep_order = np.argsort(dists, kind="stable")[:keep_n]
        kept = member_idx[keep_order]
        if len(kept) < min_concept_size:
            continue
        distinct = {instance_ids[i] for i in kept}
        if len(distinct) < min_distinct_images:
            continue
        centroid = vectors[kept].mean(axis=0)
        radius = float(np.linalg.norm(vectors[kept] - centroid, axis=1).max())
        candidates.append((kept, centroid, radius))

    candidates.sort(key=lambda item: (-len(item[0]), segment_ids[item[0][0]]))
    concepts = []
    for rank, (kept, centroid, radius) in enumerate(candidates, start=1):
        name = f"{class_name}_concept_{rank}"
        concepts.append(
            ConceptRecord(
                concept_id=name,
                class_k=class_k,
                display_name=name,
                member_segment_ids=[segment_ids[i] for i in kept],
                member_instance_ids=[instance_ids[i] for i in kept],
                centroid=centroid,
                radius=radius,
            )
        )
    return concepts, warnings
