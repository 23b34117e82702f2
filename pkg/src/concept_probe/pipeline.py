"""Pipeline orchestration: run the discovery/scoring/clustering/layout
stages in order, persist the result as a content-addressed snapshot, and
track run progress for polling."""

import datetime
import io
import os
import queue
import threading
import uuid
from dataclasses import dataclass, field, asdict

import numpy as np
from PIL import Image

from .analytics import order_instances, per_class_accuracy
from .clustering import (
    ClusteringConfig,
    cluster_concepts,
    default_k_range,
    select_cluster_count,
)
from .data import (
    DatasetManifest,
    compute_channel_means,
    load_image,
    load_manifest,
    sample_class_images,
)
from .discovery import ConceptRecord, discover_concepts, embed_patches, pool_embeddings
from .errors import ParameterError
from .layout import ClassPoint, build_cliques, cluster_boundaries, embed_2d, isomatch_layout
from .model import ModelGraph, forward, forward_batch, gradient_from_activation, load_model, predict_all
from .seeding import stable_seed
from .segmentation import Segment, crop_to_bbox, extract_segments, rle_encode, segment_to_patch
from .snapshot import ConceptSpaceSnapshot, finalize_snapshot, save_snapshot
from .tcav import filter_concepts, tcav_ensemble

STAGES = (
    "queued",
    "segmenting",
    "discovering",
    "scoring",
    "filtering",
    "clustering",
    "layouting",
    "persisting",
    "done",
    "failed",
)

PATCH_THUMBNAILS_PER_CONCEPT = 40
# CAVs train on the members nearest the concept centroid; huge clusters
# (the background mass) would otherwise dominate the runtime without
# changing the separator direction
CAV_TRAIN_CAP = 200


@dataclass
class PipelineConfig:
    dataset_path: str
    model_path: str
    layer: str
    images_per_class: int = 50
    segment_resolutions: list[int] = field(default_factory=lambda: [15, 50, 80])
    concepts_per_class: int = 10
    n_cavs: int = 20
    alpha: float = 0.01
    clustering_method: str = "kmeans"
    n_clusters: int | None = None  # None: pick by silhouette
    pooling: str = "flatten"  # "flatten" | "gap": embedding view used for clustering
    perplexity: float = 5.0
    merge_distance_fraction: float = 0.04
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ("images_per_class", "concepts_per_class", "n_cavs"):
            if getattr(self, name) < 1:
                raise ParameterError(f"{name} must be >= 1")
        if not 0.0 < self.alpha < 1.0:
            raise ParameterError("alpha must lie in (0, 1)")
        if not self.segment_resolutions:
            raise ParameterError("segment_resolutions must be non-empty")
        if self.clustering_method not in ("kmeans", "agglomerative"):
            raise ParameterError(f"unknown clustering method '{self.clustering_method}'")
        if self.n_clusters is not None and self.n_clusters < 2:
            raise ParameterError("n_clusters must be >= 2 when explicit")
        if self.pooling not in ("flatten", "gap"):
            raise ParameterError(f"unknown pooling '{self.pooling}'")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "PipelineConfig":
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in doc.items() if k in known})


@dataclass
class RunStatus:
    run_id: str
    stage: str = "queued"
    progress: float = 0.0
    warnings: list[str] = field(default_factory=list)
    error: str | None = None
    snapshot_id: str | None = None

    def advance(self, stage: str, progress: float) -> None:
        # transitions are forward-only
        if STAGES.index(stage) < STAGES.index(self.stage):
            raise ParameterError(f"stage cannot move backwards: {self.stage} -> {stage}")
        self.stage = stage
        self.progress = progress

    def to_dict(self) -> dict:
        return {
            "run_id": self.run_id,
            "stage": self.stage,
            "progress": self.progress,
            "warnings": list(self.warnings),
            "error": self.error,
            "snapshot_id": self.snapshot_id,
        }


def run_pipeline(
    config: PipelineConfig, output_root: str, status: RunStatus | None = None
) -> ConceptSpaceSnapshot:
    """Execute every stage synchronously and persist the snapshot under
    ``output_root/<snapshot_id>``. Deterministic for a fixed config."""
    st = status if status is not None else RunStatus(run_id="sync")
    try:
        snapshot = _run_stages(config, st)
    except Exception as exc:
        st.error = f"{st.stage}: {exc}"
        st.stage = "failed"
        raise
    directory = os.path.join(output_root, snapshot.snapshot_id)
    save_snapshot(snapshot, directory)
    st.snapshot_id = snapshot.snapshot_id
    st.advance("done", 1.0)
    return snapshot


def _run_stages(config: PipelineConfig, st: RunStatus) -> ConceptSpaceSnapshot:
    manifest = load_manifest(config.dataset_path)
    model = load_model(config.model_path)
    model.layer_index(config.layer)  # fail fast on a bad layer name

    st.advance("segmenting", 0.05)
    predictions, failures = predict_all(model, manifest)
    for iid, msg in failures:
        st.warnings.append(f"prediction failed for {iid}: {msg}")
    labels = {inst.instance_id: inst.label for inst in manifest.instances}
    channel_means = compute_channel_means(manifest)

    per_class: dict[int, dict] = {}
    for class_k in range(manifest.n_classes):
        sample = sample_class_images(manifest, class_k, config.images_per_class, config.seed)
        images: dict[str, np.ndarray] = {}
        segments: list[Segment] = []
        for inst in sample:
            image = load_image(inst, manifest.image_shape)
            images[inst.instance_id] = image
            segments.extend(
                extract_segments(
                    image,
                    inst.instance_id,
                    config.segment_resolutions,
                    seed=stable_seed("segments", config.seed, inst.instance_id),
                )
            )
        patches = [
            segment_to_patch(images[seg.instance_id], seg, channel_means, model.input_shape)
            for seg in segments
        ]
        embeddings = embed_patches(model, patches, config.layer)
        per_class[class_k] = {
            "sample": sample,
            "images": images,
            "segments": segments,
            "embeddings": embeddings,
            "pooled": pool_embeddings(
                embeddings, model.layer_output_shape(config.layer), config.pooling
            ),
        }

    st.advance("discovering", 0.35)
    all_concepts: list[ConceptRecord] = []
    for class_k, blob in per_class.items():
        concepts, warn = discover_concepts(
            class_k,
            manifest.class_names[class_k],
            blob["pooled"],
            [seg.segment_id for seg in blob["segments"]],
            [seg.instance_id for seg in blob["segments"]],
            config.concepts_per_class,
            stable_seed("discover", config.seed, class_k),
        )
        st.warnings.extend(warn)
        blob["concepts"] = concepts
        all_concepts.extend(concepts)

    st.advance("scoring", 0.5)
    embeddings_by_class = {k: blob["embeddings"] for k, blob in per_class.items()}
    segment_index: dict[str, int] = {}
    for blob in per_class.values():
        for i, seg in enumerate(blob["segments"]):
            segment_index[seg.segment_id] = i
    for class_k, blob in per_class.items():
        grads = _sample_gradients(model, blob, config.layer, class_k)
        blob["gradients"] = grads
        for concept in blob["concepts"]:
            member_rows = [segment_index[sid] for sid in concept.member_segment_ids]
            member_emb = blob["embeddings"][member_rows]
            if len(member_emb) > CAV_TRAIN_CAP:
                # cap by proximity in the clustering view, train in the flat view
                pooled_members = blob["pooled"][member_rows].astype(np.float64)
                dist = np.linalg.norm(pooled_members - concept.centroid[None, :], axis=1)
                member_emb = member_emb[np.argsort(dist, kind="stable")[:CAV_TRAIN_CAP]]
            cavs, stats, warn = tcav_ensemble(
                member_emb,
                embeddings_by_class,
                grads,
                class_k,
                n_cavs=config.n_cavs,
                seed=stable_seed("tcav", config.seed, concept.concept_id),
                alpha=config.alpha,
            )
            concept.cavs = cavs
            concept.tcav = stats
            st.warnings.extend(f"{concept.concept_id}: {w}" for w in warn)

    st.advance("filtering", 0.62)
    retained, discarded = filter_concepts(all_concepts, config.alpha)

    st.advance("clustering", 0.68)
    silhouette_doc: dict = {"method": config.clustering_method, "selected_k": None, "scores": {}}
    clusters = []
    if len(retained) >= 2:
        vectors = np.stack([c.centroid for c in retained])
        n_clusters = config.n_clusters
        if n_clusters is None:
            k_range = default_k_range(len(retained))
            if len(k_range) > 0:
                n_clusters, scores = select_cluster_count(
                    vectors, config.clustering_method, k_range, config.seed
                )
                silhouette_doc["scores"] = {str(k): float(v) for k, v in scores.items()}
            else:
                n_clusters = min(2, len(retained))
        n_clusters = min(n_clusters, len(retained))
        silhouette_doc["selected_k"] = int(n_clusters)
        clusters = cluster_concepts(
            retained,
            ClusteringConfig(
                method=config.clustering_method, n_clusters=n_clusters, seed=config.seed
            ),
        )
    elif len(retained) == 1:
        retained[0].cluster_id = "CC1"
        from .clustering import ConceptCluster

        clusters = [
            ConceptCluster(
                cluster_id="CC1",
                member_concept_ids=[retained[0].concept_id],
                medoid_concept_id=retained[0].concept_id,
            )
        ]
        st.warnings.append("single retained concept: trivial cluster CC1")
    else:
        st.warnings.append("no retained concepts: concept space is empty")

    st.advance("layouting", 0.78)
    layout_doc, influence_doc, tensors = _layouts_and_influence(
        config, manifest, model, predictions, labels, per_class, retained
    )

    st.advance("persisting", 0.92)
    manifest_doc, patch_bytes = _build_manifest(
        config,
        manifest,
        channel_means,
        predictions,
        failures,
        per_class,
        retained,
        discarded,
        clusters,
        silhouette_doc,
        layout_doc,
        influence_doc,
        tensors,
        st,
    )
    created = datetime.datetime.now(datetime.timezone.utc).isoformat()
    return finalize_snapshot(manifest_doc, tensors, patch_bytes, created)


def _sample_gradients(model: ModelGraph, blob: dict, layer: str, class_k: int) -> np.ndarray:
    rows = []
    for inst in blob["sample"]:
        _, activation = forward(model, blob["images"][inst.instance_id], layer)
        rows.append(gradient_from_activation(model, layer, activation, class_k).ravel())
    return np.stack(rows)


def _layouts_and_influence(config, manifest, model, predictions, labels, per_class, retained):
    tensors: dict[str, np.ndarray] = {}

    # concept space: 2D embedding of the retained centroids, hex assignment
    concept_positions: dict[str, tuple[float, float]] = {}
    hex_doc: dict = {"grid_cols": 0, "grid_rows": 0, "cells": {}}
    boundaries: list = []
    if retained:
        centroids = np.stack([c.centroid for c in retained])
        coords = embed_2d(centroids, config.perplexity, stable_seed("concept_tsne", config.seed))
        concept_positions = {
            c.concept_id: (float(x), float(y)) for c, (x, y) in zip(retained, coords)
        }
        assignment = isomatch_layout(concept_positions)
        hex_doc = {
            "grid_cols": assignment.grid_cols,
            "grid_rows": assignment.grid_rows,
            "cells": {cid: list(cell) for cid, cell in sorted(assignment.positions.items())},
        }
        cluster_of = {c.concept_id: (c.cluster_id or "unclustered") for c in retained}
        boundaries = [
            [[a[0], a[1]], [b[0], b[1]]] for a, b in cluster_boundaries(assignment, cluster_of)
        ]
        cav_dim = int(np.prod(model.layer_output_shape(config.layer)))
        for concept in retained:
            tensors[f"concept/{concept.concept_id}/centroid"] = concept.centroid.astype(np.float32)
            cav_rows = np.zeros((config.n_cavs, cav_dim), dtype=np.float32)
            for i, cav in enumerate(concept.cavs):
                if cav is not None:
                    cav_rows[i] = cav.weight.astype(np.float32)
            tensors[f"concept/{concept.concept_id}/cavs"] = cav_rows

    # class space: mean eval activation per class, embedded and aggregated
    eval_by_class: dict[int, list[str]] = {}
    eval_preds = {p.instance_id: p for p in predictions}
    for inst in manifest.instances:
        if inst.split == "eval" and inst.instance_id in eval_preds:
            eval_by_class.setdefault(inst.label, []).append(inst.instance_id)

    class_points: list[ClassPoint] = []
    mean_latents = []
    present_classes = sorted(eval_by_class)
    for class_k in present_classes:
        batch = np.stack(
            [
                load_image(manifest.by_id(iid), manifest.image_shape)
                for iid in eval_by_class[class_k]
            ]
        )
        _, acts = forward_batch(model, batch, config.layer)
        mean_latents.append(acts.reshape(len(batch), -1).mean(axis=0))
    if present_classes:
        coords = embed_2d(
            np.stack(mean_latents), config.perplexity, stable_seed("class_tsne", config.seed)
        )
        for class_k, latent, (x, y) in zip(present_classes, mean_latents, coords):
            class_points.append(
                ClassPoint(class_k=class_k, position=(float(x), float(y)), mean_latent=latent)
            )
            tensors[f"class/{class_k}/mean_latent"] = latent.astype(np.float32)
    cliques = build_cliques(class_points, predictions, labels, config.merge_distance_fraction)

    # influence matrices: ordered eval columns x the class's retained concepts
    influence_doc: dict = {}
    for class_k in present_classes:
        class_concepts = [c for c in retained if c.class_k == class_k]
        ordered = order_instances([eval_preds[iid] for iid in eval_by_class[class_k]], labels)
        if not class_concepts:
            influence_doc[str(class_k)] = {"instance_ids": ordered, "concept_ids": []}
            continue
        grads = []
        for iid in ordered:
            image = load_image(manifest.by_id(iid), manifest.image_shape)
            _, activation = forward(model, image, config.layer)
            grads.append(
                gradient_from_activation(model, config.layer, activation, class_k).ravel()
            )
        grad_mat = np.stack(grads)
        n_inst = len(ordered)
        votes = np.zeros((n_inst, len(class_concepts)), dtype=np.float32)
        s_tensor = np.zeros((n_inst, len(class_concepts), config.n_cavs), dtype=np.float32)
        for j, concept in enumerate(class_concepts):
            trained = [i for i, cav in enumerate(concept.cavs) if cav is not None]
            weights = np.stack([concept.cavs[i].weight for i in trained])
            s = grad_mat @ weights.T  # (n_inst, n_trained)
            for col, i in enumerate(trained):
                s_tensor[:, j, i] = s[:, col]
            votes[:, j] = (s > 0).mean(axis=1)
        influence_doc[str(class_k)] = {
            "instance_ids": ordered,
            "concept_ids": [c.concept_id for c in class_concepts],
            "votes_tensor": f"influence/{class_k}/votes",
            "s_tensor": f"influence/{class_k}/s",
        }
        tensors[f"influence/{class_k}/votes"] = votes
        tensors[f"influence/{class_k}/s"] = s_tensor

    layout_doc = {
        "concept_positions": {cid: [x, y] for cid, (x, y) in sorted(concept_positions.items())},
        "hex": hex_doc,
        "boundaries": boundaries,
        "class_points": [
            {"class_k": cp.class_k, "position": [cp.position[0], cp.position[1]]}
            for cp in class_points
        ],
        "cliques": [
            {
                "clique_id": cl.clique_id,
                "member_classes": cl.member_classes,
                "center": [cl.center[0], cl.center[1]],
                "radius": cl.radius,
                "mean_accuracy": cl.mean_accuracy,
                "representative_images": {str(k): v for k, v in cl.representative_images.items()},
            }
            for cl in cliques
        ],
    }
    return layout_doc, influence_doc, tensors


def _build_manifest(
    config,
    manifest,
    channel_means,
    predictions,
    failures,
    per_class,
    retained,
    discarded,
    clusters,
    silhouette_doc,
    layout_doc,
    influence_doc,
    tensors,
    st,
):
    segments_by_id: dict[str, Segment] = {}
    images_by_id: dict[str, np.ndarray] = {}
    for blob in per_class.values():
        for seg in blob["segments"]:
            segments_by_id[seg.segment_id] = seg
        images_by_id.update(blob["images"])

    patch_bytes: dict[str, bytes] = {}
    segments_doc: dict[str, dict] = {}
    concepts_doc = []
    for concept in retained:
        # rank members by centroid proximity for the patch browser
        member_ids = concept.member_segment_ids
        blob = per_class[concept.class_k]
        seg_index = {seg.segment_id: i for i, seg in enumerate(blob["segments"])}
        emb = blob["pooled"]
        dists = [
            float(np.linalg.norm(emb[seg_index[sid]].astype(np.float64) - concept.centroid))
            for sid in member_ids
        ]
        ranking = [sid for _, sid in sorted(zip(dists, member_ids))]
        thumbs = ranking[:PATCH_THUMBNAILS_PER_CONCEPT]
        for sid in thumbs:
            seg = segments_by_id[sid]
            if sid not in patch_bytes:
                crop = crop_to_bbox(images_by_id[seg.instance_id], seg, channel_means)
                buf = io.BytesIO()
                Image.fromarray(np.round(np.clip(crop, 0, 1) * 255).astype(np.uint8)).save(
                    buf, format="PNG"
                )
                patch_bytes[sid] = buf.getvalue()
                segments_doc[sid] = {
                    "instance_id": seg.instance_id,
                    "resolution_level": seg.resolution_level,
                    "bbox": list(seg.bbox),
                    "area": seg.area,
                    "rle": rle_encode(seg.mask),
                }
        concepts_doc.append(_concept_doc(concept, ranking))

    discarded_doc = [
        {
            "concept_id": c.concept_id,
            "class_k": c.class_k,
            "display_name": c.display_name,
            "size": c.size,
            "tcav": _stats_doc(c.tcav),
        }
        for c in discarded
    ]

    labels = {i.instance_id: i.label for i in manifest.instances}
    accuracy = per_class_accuracy(predictions, labels)
    manifest_doc = {
        "config": config.to_dict(),
        "dataset": {
            "path": os.path.abspath(config.dataset_path),
            "class_names": list(manifest.class_names),
            "image_shape": list(manifest.image_shape),
            "channel_means": [float(v) for v in channel_means],
            "instances": [
                {"id": i.instance_id, "path": i.path, "label": i.label, "split": i.split}
                for i in manifest.instances
            ],
        },
        "model_path": os.path.abspath(config.model_path),
        "layer": config.layer,
        "predictions": [
            {
                "instance_id": p.instance_id,
                "label": int(labels[p.instance_id]),
                "predicted_class": int(p.predicted_class),
                "confidence": float(p.confidence),
                "logits": [float(v) for v in p.logits],
                "probabilities": [float(v) for v in p.probabilities],
            }
            for p in predictions
        ],
        "prediction_failures": [[iid, msg] for iid, msg in failures],
        "class_accuracy": {str(k): float(v) for k, v in sorted(accuracy.items())},
        "probe_samples": {
            str(k): [inst.instance_id for inst in blob["sample"]]
            for k, blob in per_class.items()
        },
        "concepts": concepts_doc,
        "discarded_concepts": discarded_doc,
        "clusters": [
            {
                "cluster_id": cl.cluster_id,
                "member_concept_ids": cl.member_concept_ids,
                "medoid_concept_id": cl.medoid_concept_id,
            }
            for cl in clusters
        ],
        "silhouette": silhouette_doc,
        "segments": segments_doc,
        "layout": layout_doc,
        "influence": influence_doc,
        "warnings": list(st.warnings),
    }
    return manifest_doc, patch_bytes


def _stats_doc(stats) -> dict | None:
    if stats is None:
        return None
    return {
        "per_cav_scores": [
            None if (s != s) else float(s) for s in stats.per_cav_scores  # NaN -> null
        ],
        "mean_score": float(stats.mean_score),
        "p_value": float(stats.p_value),
        "significant": bool(stats.significant),
    }


def _concept_doc(concept: ConceptRecord, ranking: list[str]) -> dict:
    return {
        "concept_id": concept.concept_id,
        "class_k": concept.class_k,
        "display_name": concept.display_name,
        "member_segment_ids": list(concept.member_segment_ids),
        "member_instance_ids": list(concept.member_instance_ids),
        "size": concept.size,
        "radius": float(concept.radius),
        "cluster_id": concept.cluster_id,
        "tcav": _stats_doc(concept.tcav),
        "cav_validation_accuracies": [
            (float(c.validation_accuracy) if c is not None else None) for c in concept.cavs
        ],
        "patch_ranking": ranking[:PATCH_THUMBNAILS_PER_CONCEPT],
        "centroid_tensor": f"concept/{concept.concept_id}/centroid",
        "cav_tensor": f"concept/{concept.concept_id}/cavs",
    }


class PipelineRunner:
    """One pipeline run at a time; submissions queue behind it."""

    def __init__(self, output_root: str, on_complete=None):
        self.output_root = output_root
        self.on_complete = on_complete
        self._queue: "queue.Queue[tuple[str, PipelineConfig]]" = queue.Queue()
        self._statuses: dict[str, RunStatus] = {}
        self._lock = threading.Lock()
        self._worker = threading.Thread(target=self._run_loop, daemon=True)
        self._worker.start()

    def submit(self, config: PipelineConfig) -> str:
        run_id = uuid.uuid4().hex[:12]
        with self._lock:
            self._statuses[run_id] = RunStatus(run_id=run_id)
        self._queue.put((run_id, config))
        return run_id

    def status(self, run_id: str) -> RunStatus:
        with self._lock:
            if run_id not in self._statuses:
                raise ParameterError(f"unknown run id '{run_id}'")
            return self._statuses[run_id]

    def _run_loop(self) -> None:
        while True:
            run_id, config = self._queue.get()
            status = self.status(run_id)
            try:
                snapshot = run_pipeline(config, self.output_root, status)
            except Exception:
                continue  # status already carries the stage and cause
            if self.on_complete is not None:
                try:
                    self.on_complete(snapshot)
                except Exception as exc:  # pragma: no cover - defensive
                    status.warnings.append(f"post-run hook failed: {exc}")

    def wait(self, run_id: str, timeout: float = 600.0, poll: float = 0.2) -> RunStatus:
        import time

        deadline = time.monotonic() + timeout
        while time.monotonic() < deadline:
            status = self.status(run_id)
            if status.stage in ("done", "failed"):
                return status
            time.sleep(poll)
        raise TimeoutError(f"run {run_id} did not finish within {timeout}s")
