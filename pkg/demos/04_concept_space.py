"""Draw the navigable layouts out of the latest snapshot: the hex map of
the concept space with cluster borders, and the class plane with cliques."""

import glob
import json
import math
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
from matplotlib.patches import Circle, RegularPolygon

OUT = "demo_output"
snapshot_dirs = sorted(glob.glob(os.path.join(OUT, "snapshots", "*")))
doc = json.load(open(os.path.join(snapshot_dirs[-1], "manifest.json")))

cluster_of = {c["concept_id"]: c["cluster_id"] for c in doc["concepts"]}
score_of = {c["concept_id"]: c["tcav"]["mean_score"] for c in doc["concepts"]}
hex_doc = doc["layout"]["hex"]

fig, ax = plt.subplots(figsize=(7, 6))
cmap = plt.get_cmap("coolwarm_r")
for concept_id, (col, row) in hex_doc["cells"].items():
    cx = math.sqrt(3) * (col + 0.5 * (row % 2))
    cy = 1.5 * row
    ax.add_patch(
        RegularPolygon(
            (cx, cy),
            numVertices=6,
            radius=1.0,
            orientation=0.0,
            facecolor=cmap(score_of[concept_id]),
            edgecolor="lightgray",
        )
    )
    ax.text(cx, cy, cluster_of[concept_id], ha="center", va="center", fontsize=6)
for (x1, y1), (x2, y2) in doc["layout"]["boundaries"]:
    ax.plot([x1, x2], [y1, y2], color="black", linewidth=1.8)
ax.autoscale_view()
ax.set_aspect("equal")
ax.invert_yaxis()
ax.axis("off")
ax.set_title("concept space: hex cells colored by influence, dark borders between clusters")
fig.tight_layout()
fig.savefig(os.path.join(OUT, "04_hex_map.png"), dpi=120)
print(f"wrote {OUT}/04_hex_map.png")

fig, ax = plt.subplots(figsize=(6, 5))
names = doc["dataset"]["class_names"]
for clique in doc["layout"]["cliques"]:
    cx, cy = clique["center"]
    ax.add_patch(
        Circle((cx, cy), clique["radius"], alpha=0.35, color=cmap(clique["mean_accuracy"]))
    )
    label = ", ".join(names[k] for k in clique["member_classes"])
    ax.annotate(f"{label}\nacc {clique['mean_accuracy']:.2f}", (cx, cy), fontsize=8, ha="center")
for point in doc["layout"]["class_points"]:
    ax.plot(*point["position"], marker="o", color="black", markersize=3)
ax.autoscale_view()
ax.set_aspect("equal")
ax.set_title("class plane with clique circles")
fig.tight_layout()
fig.savefig(os.path.join(OUT, "04_class_plane.png"), dpi=120)
print(f"wrote {OUT}/04_class_plane.png")

print("\nclusters:")
for cluster in doc["clusters"]:
    members = ", ".join(cluster["member_concept_ids"][:4])
    extra = "" if len(cluster["member_concept_ids"]) <= 4 else f" +{len(cluster['member_concept_ids']) - 4}"
    print(f"  {cluster['cluster_id']:<5} medoid={cluster['medoid_concept_id']:<24} [{members}{extra}]")
