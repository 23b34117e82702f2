"""Run the full pipeline and read the concept table.

Each class's segment embeddings are clustered into candidate concepts; an
ensemble of 20 linear separators scores each concept's influence on its
class logit, and a t-test against the neutral 0.5 decides what survives.
The result is persisted as a content-addressed snapshot.
"""

import os

from concept_probe.pipeline import PipelineConfig, RunStatus, run_pipeline
from concept_probe.planted import CAPTURE_LAYER

OUT = "demo_output"

config = PipelineConfig(
    dataset_path=os.path.join(OUT, "fixture", "dataset", "dataset.json"),
    model_path=os.path.join(OUT, "fixture", "model"),
    layer=CAPTURE_LAYER,
    pooling="gap",
    seed=7,
)
status = RunStatus(run_id="demo")
snapshot = run_pipeline(config, os.path.join(OUT, "snapshots"), status)
doc = snapshot.manifest

print(f"snapshot {doc['snapshot_id'][:16]}...  ({len(doc['warnings'])} warnings)")
print(f"retained {len(doc['concepts'])} concepts, discarded {len(doc['discarded_concepts'])}\n")

names = doc["dataset"]["class_names"]
print(f"{'concept':<24} {'class':<8} {'size':>5} {'score':>6} {'p':>9}  cluster")
for concept in doc["concepts"]:
    stats = concept["tcav"]
    print(
        f"{concept['concept_id']:<24} {names[concept['class_k']]:<8} {concept['size']:>5} "
        f"{stats['mean_score']:>6.3f} {stats['p_value']:>9.2e}  {concept['cluster_id']}"
    )
print("\ndiscarded (p >= 0.01):")
for concept in doc["discarded_concepts"]:
    stats = concept["tcav"]
    p = f"{stats['p_value']:.3f}" if stats else "untestable"
    print(f"  {concept['concept_id']:<24} p={p}")

sil = doc["silhouette"]
print(f"\ncluster count k={sil['selected_k']} chosen by silhouette over {len(sil['scores'])} candidates")
print(f"snapshot directory: {os.path.join(OUT, 'snapshots', doc['snapshot_id'])}")
