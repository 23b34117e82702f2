"""Superpixel segmentation at three resolutions and the patch convention.

Each segment becomes a model-ready patch by keeping its pixels on the full
canvas and filling everything else with the dataset's channel means, so the
classifier sees the fragment in its original position.
"""

import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from concept_probe.data import compute_channel_means, load_image, load_manifest
from concept_probe.segmentation import extract_segments, segment_to_patch, slic

OUT = "demo_output"
manifest = load_manifest(os.path.join(OUT, "fixture", "dataset", "dataset.json"))
channel_means = compute_channel_means(manifest)

inst = manifest.class_instances(0, "probe")[0]
image = load_image(inst, manifest.image_shape)

fig, axes = plt.subplots(1, 4, figsize=(12, 3.2))
axes[0].imshow(image)
axes[0].set_title(inst.instance_id, fontsize=8)
for ax, n_segments in zip(axes[1:], (15, 50, 80)):
    labels = slic(image, n_segments)
    ax.imshow(labels, cmap="tab20")
    ax.set_title(f"requested {n_segments}, got {labels.max() + 1}", fontsize=8)
for ax in axes:
    ax.axis("off")
fig.tight_layout()
fig.savefig(os.path.join(OUT, "02_slic_resolutions.png"), dpi=120)
print(f"wrote {OUT}/02_slic_resolutions.png")

segments = extract_segments(image, inst.instance_id, [15, 50, 80])
print(f"{len(segments)} segments across three resolutions "
      f"(areas {min(s.area for s in segments)}..{max(s.area for s in segments)} px)")

fig, axes = plt.subplots(2, 6, figsize=(12, 4.2))
picks = segments[:: max(1, len(segments) // 6)][:6]
for col, seg in enumerate(picks):
    patch = segment_to_patch(image, seg, channel_means, (32, 32, 3))
    axes[0, col].imshow(seg.mask, cmap="gray")
    axes[0, col].set_title(f"{seg.resolution_level} / {seg.area}px", fontsize=8)
    axes[1, col].imshow(patch.pixels)
    for row in (0, 1):
        axes[row, col].axis("off")
axes[0, 0].set_ylabel("mask")
axes[1, 0].set_ylabel("patch")
fig.suptitle("segment masks (top) and mean-infilled patches (bottom)")
fig.tight_layout()
fig.savefig(os.path.join(OUT, "02_patches.png"), dpi=120)
print(f"wrote {OUT}/02_patches.png")
