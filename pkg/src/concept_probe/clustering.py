"""Cross-class clustering of retained concepts, with silhouette-based
selection of the default cluster count."""

from dataclasses import dataclass, field

import numpy as np

from .discovery import ConceptRecord, kmeans
from .errors import ParameterError
from .seeding import stable_seed

DEFAULT_MAX_K = 30


@dataclass
class ConceptCluster:
    cluster_id: str  # "CC{n}", numbered by descending size
    member_concept_ids: list[str]
    medoid_concept_id: str
    annotation: str = ""


@dataclass
class ClusteringConfig:
    method: str = "kmeans"  # "kmeans" | "agglomerative"
    n_clusters: int | None = None  # None selects by silhouette
    seed: int = 0

    def __post_init__(self) -> None:
        if self.method not in ("kmeans", "agglomerative"):
            raise ParameterError(f"unknown clustering method '{self.method}'")
        if self.n_clusters is not None and self.n_clusters < 2:
            raise ParameterError("an explicit cluster count must be >= 2")


def ward_agglomerate(vectors: np.ndarray, n_clusters: int) -> tuple[np.ndarray, list[float]]:
    """Bottom-up Ward clustering on raw vectors.

    Each merge pays the increase in total within-cluster squared error,
    n_i*n_j/(n_i+n_j) * ||c_i - c_j||^2; the cheapest pair merges first,
    ties broken toward the oldest pair. Returns (assignments, merge costs).
    """
    vectors = np.asarray(vectors, dtype=np.float64)
    n = len(vectors)
    if n_clusters < 1 or n_clusters > n:
        raise ParameterError(f"n_clusters {n_clusters} out of range for {n} points")
    active: dict[int, tuple[np.ndarray, int, list[int]]] = {
        i: (vectors[i].copy(), 1, [i]) for i in range(n)
    }
    costs: list[float] = []
    next_id = n
    while len(active) > n_clusters:
        ids = sorted(active)
        best = None
        for ai in range(len(ids)):
            ci, ni, _ = active[ids[ai]]
            for bi in range(ai + 1, len(ids)):
                cj, nj, _ = active[ids[bi]]
                cost = ni * nj / (ni + nj) * float(((ci - cj) ** 2).sum())
                key = (cost, ids[ai], ids[bi])
                if best is None or key < best:
                    best = key
        cost, ia, ib = best
        costs.append(cost)
        ci, ni, mi = active.pop(ia)
        cj, nj, mj = active.pop(ib)
        merged_centroid = (ni * ci + nj * cj) / (ni + nj)
        active[next_id] = (merged_centroid, ni + nj, mi + mj)
        next_id += 1

    assignments = np.empty(n, dtype=np.int64)
    for new_label, cid in enumerate(sorted(active)):
        for idx in active[cid][2]:
            assignments[idx] = new_label
    return assignments, costs


def _assignments_for(
    vectors: np.ndarray, method: str, n_clusters: int, seed: int
) -> np.ndarray:
    if method == "kmeans":
        return kmeans(vectors, n_clusters, stable_seed("concept_clusters", seed)).assignments
    return ward_agglomerate(vectors, n_clusters)[0]


def cluster_concepts(
    concepts: list[ConceptRecord], config: ClusteringConfig
) -> list[ConceptCluster]:
    """Partition the retained concepts over their centroid vectors and tag
    each concept with its cluster id."""
    if len(concepts) < 2:
        raise ParameterError("need at least two retained concepts to cluster")
    vectors = np.stack([c.centroid for c in concepts])
    n_clusters = config.n_clusters
    if n_clusters is None:
        n_clusters, _ = select_cluster_count(
            vectors, config.method, default_k_range(len(concepts)), config.seed
        )
    if n_clusters > len(concepts):
        raise ParameterError(
            f"n_clusters {n_clusters} exceeds the {len(concepts)} retained concepts"
        )
    assignments = _assignments_for(vectors, config.method, n_clusters, config.seed)

    groups: dict[int, list[int]] = {}
    for idx, a in enumerate(assignments):
        groups.setdefault(int(a), []).append(idx)
    ordered = sorted(
        groups.values(), key=lambda idxs: (-len(idxs), concepts[idxs[0]].concept_id)
    )
    clusters = []
    for rank, idxs in enumerate(ordered, start=1):
        cid = f"CC{rank}"
        member_ids = [concepts[i].concept_id for i in idxs]
        sub = vectors[idxs]
        summed = np.linalg.norm(sub[:, None, :] - sub[None, :, :], axis=2).sum(axis=1)
        medoid = member_ids[int(np.argmin(summed))]
        for i in idxs:
            concepts[i].cluster_id = cid
        clusters.append(
            ConceptCluster(cluster_id=cid, member_concept_ids=member_ids, medoid_concept_id=medoid)
        )
    return clusters


def silhouette_score(vectors: np.ndarray, assignments: np.ndarray) -> float:
    """Mean of (b - a) / max(a, b); singleton members contribute 0."""
    vectors = np.asarray(vectors, dtype=np.float64)
    assignments = np.asarray(assignments)
    labels = np.unique(assignments)
    if len(labels) < 2:
        raise ParameterError("silhouette needs at least two clusters")
    dist = np.linalg.norm(vectors[:, None, :] - vectors[None, :, :], axis=2)
    scores = np.zeros(len(vectors))
    for i in range(len(vectors)):
        own = assignments == assignments[i]
        n_own = own.sum()
        if n_own <= 1:
            continue  # singleton: defined as 0
        a = dist[i, own].sum() / (n_own - 1)
        b = min(dist[i, assignments == lab].mean() for lab in labels if lab != assignments[i])
        denom = max(a, b)
        scores[i] = 0.0 if denom == 0.0 else (b - a) / denom
    return float(scores.mean())


def default_k_range(n_concepts: int) -> range:
    return range(2, min(DEFAULT_MAX_K, n_concepts - 1) + 1)


def select_cluster_count(
    vectors: np.ndarray, method: str, k_range, seed: int
) -> tuple[int, dict[int, float]]:
    """Silhouette over each k in ``k_range``; best k wins, ties to the
    smaller k."""
    ks = sorted(set(int(k) for k in k_range))
    if not ks:
        raise ParameterError("k_range must be non-empty")
    n = len(vectors)
    if ks[0] < 2 or ks[-1] > n - 1:
        raise ParameterError(f"k_range must lie within [2, {n - 1}]")
    scores: dict[int, float] = {}
    for k in ks:
        assignments = _assignments_for(np.asarray(vectors), method, k, seed)
        scores[k] = silhouette_score(vectors, assignments)
    best_k = max(ks, key=lambda k: (scores[k], -k))
    return best_k, scores


def concept_similarity(
    concept_a: ConceptRecord, concept_b: ConceptRecord, clusters: list[ConceptCluster]
) -> int:
    """1 iff both concepts sit in the same cluster, else 0."""
    membership = {cid: cl.cluster_id for cl in clusters for cid in cl.member_concept_ids}
    for concept in (concept_a, concept_b):
        if concept.concept_id not in membership:
            raise ParameterError(f"concept '{concept.concept_id}' is not assigned to any cluster")
    return int(membership[concept_a.concept_id] == membership[concept_b.concept_id])
