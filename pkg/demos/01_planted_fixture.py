"""Build the planted fixture and look at what the frozen classifier sees.

The fixture is a desk-scale stand-in for a real dataset/model pair: three
classes (diagonal stripes, a dot lattice, a plain panel) drawn over two
shared background textures, plus a six-layer CNN whose filters were set by
hand to detect exactly those patterns. Everything downstream in this demo
series runs against it.
"""

import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from concept_probe.data import load_image, load_manifest
from concept_probe.model import forward, load_model
from concept_probe.planted import CAPTURE_LAYER, build_planted_fixture

OUT = "demo_output"
os.makedirs(OUT, exist_ok=True)

paths = build_planted_fixture(os.path.join(OUT, "fixture"), seed=0)
manifest = load_manifest(paths.dataset_json)
model = load_model(paths.model_dir)

print(f"dataset: {len(manifest.instances)} instances, classes {manifest.class_names}")
print(f"model:   {[layer.name for layer in model.layers]}")
print(f"capture layer '{CAPTURE_LAYER}' has shape {model.layer_output_shape(CAPTURE_LAYER)}")

fig, axes = plt.subplots(3, 6, figsize=(12, 6))
for row, class_k in enumerate(range(3)):
    instances = manifest.class_instances(class_k, "eval")[:6]
    for col, inst in enumerate(instances):
        image = load_image(inst, manifest.image_shape)
        pred, _ = forward(model, image, CAPTURE_LAYER)
        ax = axes[row, col]
        ax.imshow(image)
        ok = pred.predicted_class == inst.label
        ax.set_title(
            f"{manifest.class_names[pred.predicted_class]} {pred.confidence:.2f}",
            fontsize=8,
            color="black" if ok else "crimson",
        )
        ax.axis("off")
    axes[row, 0].set_ylabel(manifest.class_names[class_k])
fig.suptitle("eval images with the frozen model's predictions")
fig.tight_layout()
fig.savefig(os.path.join(OUT, "01_fixture_predictions.png"), dpi=120)
print(f"wrote {OUT}/01_fixture_predictions.png")

# per-class eval accuracy
correct = {k: 0 for k in range(3)}
totals = {k: 0 for k in range(3)}
for inst in manifest.split_instances("eval"):
    image = load_image(inst, manifest.image_shape)
    pred, _ = forward(model, image, CAPTURE_LAYER)
    totals[inst.label] += 1
    correct[inst.label] += pred.predicted_class == inst.label
for k, name in enumerate(manifest.class_names):
    print(f"  {name:8s} eval accuracy {correct[k]}/{totals[k]}")
