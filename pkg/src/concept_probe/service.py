"""HTTP service over immutable snapshots.

Read endpoints project the currently served snapshot; the only writes are
cluster annotations (stored in a sidecar next to the snapshot directories,
keyed by snapshot id) and pipeline run submissions. A completed run swaps
the served snapshot atomically; readers always see a complete snapshot.
"""

import json
import os
import threading
import datetime

import numpy as np
from fastapi import FastAPI, HTTPException, Query, Response
from pydantic import BaseModel

from .analytics import concept_presence, instance_influence
from .clustering import default_k_range, select_cluster_count
from .data import DatasetManifest, InstanceMeta, load_image
from .discovery import ConceptRecord
from .errors import ConceptProbeError
from .model import load_model
from .pipeline import PipelineConfig, PipelineRunner
from .seeding import stable_seed
from .segmentation import mask_to_polygons
from .snapshot import ConceptSpaceSnapshot, load_snapshot
from .tcav import Cav, TcavStats

ANNOTATIONS_FILE = "annotations.json"


class AnnotationBody(BaseModel):
    text: str


class ConfusionBody(BaseModel):
    class_ids: list[int]


class InfluenceBody(BaseModel):
    concept_ids: list[str]


class ServingState:
    """Holds the served snapshot and everything derived from it; `swap`
    replaces the whole bundle in one assignment."""

    def __init__(self, snapshot_dir: str):
        self.root = os.path.dirname(os.path.abspath(snapshot_dir))
        self._lock = threading.Lock()
        self._bundle = _Bundle(load_snapshot(snapshot_dir))

    @property
    def bundle(self) -> "_Bundle":
        return self._bundle

    def swap(self, snapshot: ConceptSpaceSnapshot) -> None:
        bundle = _Bundle(snapshot)
        self._bundle = bundle  # atomic reference swap

    # -- annotations -----------------------------------------------------

    def annotations_path(self) -> str:
        return os.path.join(self.root, ANNOTATIONS_FILE)

    def read_annotations(self, snapshot_id: str, cluster_id: str) -> list[dict]:
        path = self.annotations_path()
        if not os.path.exists(path):
            return []
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
        return doc.get(snapshot_id, {}).get(cluster_id, [])

    def append_annotation(self, snapshot_id: str, cluster_id: str, text: str) -> dict:
        entry = {
            "text": text,
            "created_at": datetime.datetime.now(datetime.timezone.utc).isoformat(),
        }
        path = self.annotations_path()
        with self._lock:
            doc = {}
            if os.path.exists(path):
                with open(path, "r", encoding="utf-8") as fh:
                    doc = json.load(fh)
            doc.setdefault(snapshot_id, {}).setdefault(cluster_id, []).append(entry)
            tmp = path + ".tmp"
            with open(tmp, "w", encoding="utf-8") as fh:
                json.dump(doc, fh, indent=1)
            os.replace(tmp, path)
        return entry


class _Bundle:
    """A snapshot plus the dataset/model it references, loaded once."""

    def __init__(self, snapshot: ConceptSpaceSnapshot):
        self.snapshot = snapshot
        doc = snapshot.manifest
        dataset = doc["dataset"]
        root = os.path.dirname(dataset["path"])
        self.dataset = DatasetManifest(
            class_names=list(dataset["class_names"]),
            image_shape=tuple(dataset["image_shape"]),
            instances=[
                InstanceMeta(
                    instance_id=e["id"],
                    path=e["path"],
                    label=int(e["label"]),
                    split=e["split"],
                    resolved_path=os.path.join(root, e["path"]),
                )
                for e in dataset["instances"]
            ],
            root=root,
        )
        self.channel_means = np.asarray(dataset["channel_means"], dtype=np.float64)
        self.model = load_model(doc["model_path"])
        self.config = PipelineConfig.from_dict(doc["config"])
        self.concepts: dict[str, dict] = {c["concept_id"]: c for c in doc["concepts"]}
        self.predictions: dict[str, dict] = {p["instance_id"]: p for p in doc["predictions"]}

    def concept_record(self, concept_id: str) -> ConceptRecord:
        doc = self.concepts[concept_id]
        cav_rows = self.snapshot.tensor(doc["cav_tensor"]).astype(np.float64)
        cavs: list[Cav | None] = []
        for i, acc in enumerate(doc["cav_validation_accuracies"]):
            if acc is None:
                cavs.append(None)
            else:
                cavs.append(
                    Cav(weight=cav_rows[i], bias=0.0, validation_accuracy=acc, counterexample_seed=0)
                )
        stats = doc["tcav"]
        return ConceptRecord(
            concept_id=doc["concept_id"],
            class_k=doc["class_k"],
            display_name=doc["display_name"],
            member_segment_ids=list(doc["member_segment_ids"]),
            member_instance_ids=list(doc["member_instance_ids"]),
            centroid=self.snapshot.tensor(doc["centroid_tensor"]).astype(np.float64),
            radius=float(doc["radius"]),
            tcav=TcavStats(
                per_cav_scores=[s for s in stats["per_cav_scores"]],
                mean_score=stats["mean_score"],
                p_value=stats["p_value"],
                significant=stats["significant"],
            )
            if stats
            else None,
            cavs=cavs,
        )


def create_app(state: ServingState, runner: PipelineRunner | None = None) -> FastAPI:
    app = FastAPI(title="concept-probe", version="0.1.0")
    if runner is None:
        runner = PipelineRunner(state.root, on_complete=state.swap)

    def snap() -> ConceptSpaceSnapshot:
        return state.bundle.snapshot

    # -- classes ---------------------------------------------------------

    @app.get("/api/classes")
    def classes():
        doc = snap().manifest
        return {
            "snapshot_id": doc["snapshot_id"],
            "class_names": doc["dataset"]["class_names"],
            "accuracy": doc["class_accuracy"],
            "class_points": doc["layout"]["class_points"],
            "cliques": doc["layout"]["cliques"],
        }

    @app.get("/api/classes/{class_k}/concepts")
    def class_concepts(class_k: int):
        doc = snap().manifest
        if not 0 <= class_k < len(doc["dataset"]["class_names"]):
            raise HTTPException(404, f"no class {class_k}")
        concepts = [c for c in doc["concepts"] if c["class_k"] == class_k]
        return {
            "class_k": class_k,
            "class_name": doc["dataset"]["class_names"][class_k],
            "concepts": [_concept_payload(c) for c in concepts],
        }

    @app.post("/api/confusion")
    def confusion_matrix(body: ConfusionBody):
        doc = snap().manifest
        n_classes = len(doc["dataset"]["class_names"])
        if not body.class_ids or any(not 0 <= k < n_classes for k in body.class_ids):
            raise HTTPException(422, "class_ids must name existing classes")
        subset = list(body.class_ids)
        col_of = {k: i for i, k in enumerate(subset)}
        counts = [[0] * (len(subset) + 1) for _ in subset]
        cells: list[list[list]] = [[[] for _ in range(len(subset) + 1)] for _ in subset]
        for pred in doc["predictions"]:
            if pred["label"] not in col_of:
                continue
            row = col_of[pred["label"]]
            col = col_of.get(pred["predicted_class"], len(subset))
            counts[row][col] += 1
            cells[row][col].append((-pred["confidence"], pred["instance_id"]))
        return {
            "class_subset": subset,
            "columns": subset + ["other"],
            "counts": counts,
            "cell_instances": [[[iid for _, iid in sorted(cell)] for cell in row] for row in cells],
        }

    # -- concepts ----------------------------------------------------------

    @app.get("/api/concepts/{concept_id}")
    def concept(concept_id: str):
        bundle = state.bundle
        if concept_id not in bundle.concepts:
            raise HTTPException(404, f"no concept '{concept_id}'")
        return _concept_payload(bundle.concepts[concept_id])

    @app.get("/api/concepts/{concept_id}/patches")
    def concept_patches(concept_id: str, limit: int = Query(default=5, ge=1)):
        bundle = state.bundle
        if concept_id not in bundle.concepts:
            raise HTTPException(404, f"no concept '{concept_id}'")
        doc = bundle.concepts[concept_id]
        ranked = doc["patch_ranking"][:limit]
        segments = snap().manifest["segments"]
        return {
            "concept_id": concept_id,
            "patches": [
                {
                    "segment_id": sid,
                    "instance_id": segments[sid]["instance_id"],
                    "url": f"/assets/patches/{sid}.png",
                }
                for sid in ranked
            ],
        }

    # -- clusters ----------------------------------------------------------

    @app.get("/api/clusters")
    def clusters():
        doc = snap().manifest
        return {"clusters": doc["clusters"], "silhouette": doc["silhouette"]}

    @app.get("/api/clusters/{cluster_id}")
    def cluster(cluster_id: str):
        doc = snap().manifest
        for cl in doc["clusters"]:
            if cl["cluster_id"] == cluster_id:
                members = [
                    _concept_payload(state.bundle.concepts[cid])
                    for cid in cl["member_concept_ids"]
                ]
                return {
                    **cl,
                    "members": members,
                    "annotations": state.read_annotations(doc["snapshot_id"], cluster_id),
                }
        raise HTTPException(404, f"no cluster '{cluster_id}'")

    @app.post("/api/clusters/{cluster_id}/annotation")
    def annotate(cluster_id: str, body: AnnotationBody):
        doc = snap().manifest
        if cluster_id not in {cl["cluster_id"] for cl in doc["clusters"]}:
            raise HTTPException(404, f"no cluster '{cluster_id}'")
        entry = state.append_annotation(doc["snapshot_id"], cluster_id, body.text)
        return {
            "cluster_id": cluster_id,
            "annotation": entry,
            "annotations": state.read_annotations(doc["snapshot_id"], cluster_id),
        }

    # -- layouts -----------------------------------------------------------

    @app.get("/api/layout/hex")
    def layout_hex():
        doc = snap().manifest
        cluster_of = {c["concept_id"]: c["cluster_id"] for c in doc["concepts"]}
        return {
            "grid_cols": doc["layout"]["hex"]["grid_cols"],
            "grid_rows": doc["layout"]["hex"]["grid_rows"],
            "cells": [
                {
                    "concept_id": cid,
                    "col": cell[0],
                    "row": cell[1],
                    "cluster_id": cluster_of.get(cid),
                    "mean_score": state.bundle.concepts[cid]["tcav"]["mean_score"],
                }
                for cid, cell in doc["layout"]["hex"]["cells"].items()
            ],
            "boundaries": doc["layout"]["boundaries"],
        }

    @app.get("/api/layout/classes")
    def layout_classes():
        doc = snap().manifest
        return {
            "class_points": doc["layout"]["class_points"],
            "cliques": doc["layout"]["cliques"],
        }

    # -- instances -----------------------------------------------------------

    @app.get("/api/classes/{class_k}/instances")
    def class_instances(class_k: int, order: str = Query(default="influence-matrix")):
        doc = snap().manifest
        if order != "influence-matrix":
            raise HTTPException(422, f"unknown order '{order}'")
        infl = doc["influence"].get(str(class_k))
        if infl is None:
            raise HTTPException(404, f"no influence matrix for class {class_k}")
        preds = state.bundle.predictions
        votes = (
            snap().tensor(infl["votes_tensor"]).tolist() if "votes_tensor" in infl else []
        )
        return {
            "class_k": class_k,
            "instance_ids": infl["instance_ids"],
            "concept_ids": infl["concept_ids"],
            "influences": votes,
            "correct": [
                preds[iid]["predicted_class"] == preds[iid]["label"]
                for iid in infl["instance_ids"]
            ],
            "confidence": [preds[iid]["confidence"] for iid in infl["instance_ids"]],
        }

    @app.get("/api/instances/{instance_id}")
    def instance(instance_id: str):
        bundle = state.bundle
        doc = snap().manifest
        if instance_id not in bundle.predictions:
            raise HTTPException(404, f"no eval instance '{instance_id}'")
        pred = bundle.predictions[instance_id]
        class_k = pred["label"]
        infl = doc["influence"].get(str(class_k), {})
        influences = []
        if "votes_tensor" in infl and instance_id in infl["instance_ids"]:
            row = infl["instance_ids"].index(instance_id)
            votes = snap().tensor(infl["votes_tensor"])
            s_vals = snap().tensor(infl["s_tensor"])
            for j, cid in enumerate(infl["concept_ids"]):
                influences.append(
                    {
                        "concept_id": cid,
                        "influence": float(votes[row, j]),
                        "s_values": [float(v) for v in s_vals[row, j]],
                    }
                )
        overlays = _presence_overlays(state, instance_id, class_k)
        return {
            "instance_id": instance_id,
            "label": class_k,
            "class_name": doc["dataset"]["class_names"][class_k],
            "prediction": pred,
            "image_url": f"/assets/images/{instance_id}.png",
            "influences": influences,
            "presence": overlays,
        }

    @app.post("/api/instances/{instance_id}/influence")
    def cross_influence(instance_id: str, body: InfluenceBody):
        bundle = state.bundle
        try:
            inst = bundle.dataset.by_id(instance_id)
        except ConceptProbeError:
            raise HTTPException(404, f"no instance '{instance_id}'")
        image = load_image(inst, bundle.dataset.image_shape)
        out = []
        for cid in body.concept_ids:
            if cid not in bundle.concepts:
                raise HTTPException(404, f"no concept '{cid}'")
            record = bundle.concept_record(cid)
            row, samples = instance_influence(
                bundle.model, image, instance_id, record, bundle.config.layer
            )
            out.append(
                {
                    "concept_id": cid,
                    "influence": row.influence,
                    "s_values": [s.s_value for s in samples],
                }
            )
        return {"instance_id": instance_id, "influences": out}

    # -- pipeline -----------------------------------------------------------

    @app.post("/api/pipeline/run")
    def pipeline_run(body: dict):
        try:
            config = PipelineConfig.from_dict(body)
        except (TypeError, ConceptProbeError) as exc:
            raise HTTPException(422, f"bad pipeline config: {exc}")
        run_id = runner.submit(config)
        return {"run_id": run_id}

    @app.get("/api/pipeline/status/{run_id}")
    def pipeline_status(run_id: str):
        try:
            return runner.status(run_id).to_dict()
        except ConceptProbeError:
            raise HTTPException(404, f"no run '{run_id}'")

    @app.get("/api/silhouette")
    def silhouette(
        method: str = Query(default="kmeans"),
        start: int = Query(default=2, alias="from"),
        to: int | None = Query(default=None),
    ):
        doc = snap().manifest
        concepts = doc["concepts"]
        if len(concepts) < 3:
            raise HTTPException(422, "too few concepts for a silhouette sweep")
        vectors = np.stack(
            [snap().tensor(c["centroid_tensor"]).astype(np.float64) for c in concepts]
        )
        hi = min(to if to is not None else len(concepts) - 1, len(concepts) - 1)
        lo = max(2, start)
        if lo > hi:
            raise HTTPException(422, f"empty k range [{lo}, {hi}]")
        best, scores = select_cluster_count(
            vectors, method, range(lo, hi + 1), doc["config"]["seed"]
        )
        return {"method": method, "best_k": best, "scores": {str(k): v for k, v in scores.items()}}

    # -- assets ----------------------------------------------------------------

    @app.get("/api/snapshot")
    def snapshot_info():
        doc = snap().manifest
        return {
            "snapshot_id": doc["snapshot_id"],
            "created_at": doc["created_at"],
            "config": doc["config"],
            "warnings": doc["warnings"],
        }

    @app.get("/assets/patches/{segment_id}.png")
    def patch_png(segment_id: str):
        try:
            payload = snap().patch_png(segment_id)
        except (KeyError, FileNotFoundError):
            raise HTTPException(404, f"no patch '{segment_id}'")
        return Response(content=payload, media_type="image/png")

    @app.get("/assets/images/{instance_id}.png")
    def image_png(instance_id: str):
        try:
            inst = state.bundle.dataset.by_id(instance_id)
        except ConceptProbeError:
            raise HTTPException(404, f"no instance '{instance_id}'")
        with open(inst.resolved_path, "rb") as fh:
            return Response(content=fh.read(), media_type="image/png")

    app.state.serving = state
    app.state.runner = runner
    return app


def _concept_payload(doc: dict) -> dict:
    return {
        "concept_id": doc["concept_id"],
        "class_k": doc["class_k"],
        "display_name": doc["display_name"],
        "size": doc["size"],
        "cluster_id": doc["cluster_id"],
        "tcav": doc["tcav"],
        "cav_validation_accuracies": doc["cav_validation_accuracies"],
        "patch_urls": [f"/assets/patches/{sid}.png" for sid in doc["patch_ranking"][:5]],
    }


def _presence_overlays(state: ServingState, instance_id: str, class_k: int) -> list[dict]:
    bundle = state.bundle
    doc = bundle.snapshot.manifest
    concepts = [
        bundle.concept_record(c["concept_id"]) for c in doc["concepts"] if c["class_k"] == class_k
    ]
    if not concepts:
        return []
    inst = bundle.dataset.by_id(instance_id)
    image = load_image(inst, bundle.dataset.image_shape)
    presences, segments = concept_presence(
        bundle.model,
        image,
        instance_id,
        concepts,
        bundle.config.layer,
        bundle.config.segment_resolutions,
        bundle.channel_means,
        seed=stable_seed("segments", bundle.config.seed, instance_id),
        pooling=bundle.config.pooling,
    )
    seg_map = {seg.segment_id: seg for seg in segments}
    out = []
    for presence in presences:
        polygons = []
        for sid in presence.matching_segment_ids:
            polygons.extend(mask_to_polygons(seg_map[sid].mask))
        out.append(
            {
                "concept_id": presence.concept_id,
                "present": presence.present,
                "matching_segment_ids": presence.matching_segment_ids,
                "polygons": [[[float(x), float(y)] for x, y in ring] for ring in polygons],
            }
        )
    return out
