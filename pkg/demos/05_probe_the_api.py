"""Poke the HTTP surface the frontend consumes, in-process.

The same app can be served for real with

    concept-probe serve --snapshot demo_output/snapshots/<id> --addr 127.0.0.1:8000
"""

import glob
import os

from fastapi.testclient import TestClient

from concept_probe.pipeline import PipelineRunner
from concept_probe.service import ServingState, create_app

OUT = "demo_output"
snapshot_dir = sorted(glob.glob(os.path.join(OUT, "snapshots", "*")))[-1]
state = ServingState(snapshot_dir)
app = create_app(state, PipelineRunner(os.path.dirname(snapshot_dir), on_complete=state.swap))
client = TestClient(app)

classes = client.get("/api/classes").json()
print("classes:", classes["class_names"])
print("accuracy:", classes["accuracy"])

concepts = client.get("/api/classes/0/concepts").json()["concepts"]
best = max(concepts, key=lambda c: c["tcav"]["mean_score"])
print(f"\nmost influential 'striped' concept: {best['concept_id']} "
      f"(score {best['tcav']['mean_score']:.3f}, cluster {best['cluster_id']})")
patches = client.get(f"/api/concepts/{best['concept_id']}/patches").json()["patches"]
print("its five representative patches:", [p["segment_id"] for p in patches])

cid = best["cluster_id"]
client.post(f"/api/clusters/{cid}/annotation", json={"text": "diagonal bands"})
notes = client.get(f"/api/clusters/{cid}").json()["annotations"]
print(f"\nannotations on {cid}: {[a['text'] for a in notes]}")

matrix = client.get("/api/classes/0/instances?order=influence-matrix").json()
print(f"\ninfluence matrix: {len(matrix['instance_ids'])} instances x {len(matrix['concept_ids'])} concepts")
print("leftmost column (most confident correct):", matrix["instance_ids"][0])
print("rightmost column (most confident miss):  ", matrix["instance_ids"][-1])

detail = client.get(f"/api/instances/{matrix['instance_ids'][-1]}").json()
print(f"\nthat instance was labeled '{detail['class_name']}' but predicted class "
      f"{detail['prediction']['predicted_class']} at {detail['prediction']['confidence']:.2f}")
for entry in detail["influences"][:5]:
    print(f"  {entry['concept_id']:<24} influence {entry['influence']:.2f}")
present = [e["concept_id"] for e in detail["presence"] if e["present"]]
print("concepts present in the image:", present or "none above the membership radius")
