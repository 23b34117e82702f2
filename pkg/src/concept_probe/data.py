"""Dataset ingestion: manifest, splits, pixels, and per-channel statistics.

Layout on disk: a ``dataset.json`` manifest next to an ``images/`` directory
of PNG files. Pixels are loaded on demand; the manifest itself never touches
image bytes. The probe split feeds concept discovery and influence scoring,
the eval split feeds accuracy/confusion/instance analytics.
"""

import json
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .errors import EmptyClassError, FormatError, ValidationError
from .seeding import derived_rng

SPLITS = ("probe", "eval")


@dataclass
class InstanceMeta:
    instance_id: str
    path: str  # relative to the manifest directory
    label: int
    split: str
    resolved_path: str = ""


@dataclass
class DatasetManifest:
    class_names: list[str]
    image_shape: tuple[int, int, int]
    instances: list[InstanceMeta]
    root: str = ""
    _channel_means: np.ndarray | None = field(default=None, repr=False)

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def split_instances(self, split: str) -> list[InstanceMeta]:
        return [inst for inst in self.instances if inst.split == split]

    def class_instances(self, class_k: int, split: str) -> list[InstanceMeta]:
        return [inst for inst in self.instances if inst.split == split and inst.label == class_k]

    def by_id(self, instance_id: str) -> InstanceMeta:
        for inst in self.instances:
            if inst.instance_id == instance_id:
                return inst
        raise ValidationError(f"unknown instance '{instance_id}'", subject=instance_id)


def load_manifest(path: str) -> DatasetManifest:
    """Parse and validate ``dataset.json``; does not load pixels."""
    with open(path, "rb") as fh:
        raw = fh.read()
    try:
        doc = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise FormatError(f"malformed dataset.json: {exc.msg}", byte_offset=exc.pos) from exc
    for key in ("class_names", "image_shape", "instances"):
        if key not in doc:
            raise FormatError(f"dataset.json missing '{key}'", byte_offset=0)

    root = os.path.dirname(os.path.abspath(path))
    class_names = [str(c) for c in doc["class_names"]]
    image_shape = tuple(int(v) for v in doc["image_shape"])
    if len(image_shape) != 3:
        raise ValidationError("image_shape must be (height, width, channels)", subject="image_shape")

    instances: list[InstanceMeta] = []
    seen: set[str] = set()
    for entry in doc["instances"]:
        iid = str(entry["id"])
        if iid in seen:
            raise ValidationError(f"duplicate instance id '{iid}'", subject=iid)
        seen.add(iid)
        label = int(entry["label"])
        if not 0 <= label < len(class_names):
            raise ValidationError(
                f"instance '{iid}' label {label} out of range for {len(class_names)} classes",
                subject=iid,
            )
        split = str(entry["split"])
        if split not in SPLITS:
            raise ValidationError(f"instance '{iid}' has unknown split '{split}'", subject=iid)
        resolved = os.path.join(root, entry["path"])
        if not os.path.exists(resolved):
            raise ValidationError(f"instance '{iid}' path '{entry['path']}' not found", subject=iid)
        instances.append(
            InstanceMeta(
                instance_id=iid,
                path=str(entry["path"]),
                label=label,
                split=split,
                resolved_path=resolved,
            )
        )
    return DatasetManifest(
        class_names=class_names, image_shape=image_shape, instances=instances, root=root
    )


def save_manifest(manifest: DatasetManifest, path: str) -> None:
    doc = {
        "class_names": list(manifest.class_names),
        "image_shape": list(manifest.image_shape),
        "instances": [
            {"id": inst.instance_id, "path": inst.path, "label": inst.label, "split": inst.split}
            for inst in manifest.instances
        ],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1)


def sample_class_images(
    manifest: DatasetManifest, class_k: int, n: int, seed: int
) -> list[InstanceMeta]:
    """min(n, available) probe instances of one class, without replacement,
    deterministic under (manifest order, class, n, seed)."""
    pool = manifest.class_instances(class_k, "probe")
    if not pool:
        raise EmptyClassError(f"class {class_k} has no probe instances")
    rng = derived_rng("sample_class_images", seed, class_k)
    order = rng.permutation(len(pool))
    return [pool[i] for i in order[: min(n, len(pool))]]


def load_image(path_or_instance, image_shape: tuple[int, int, int]) -> np.ndarray:
    """Decode a PNG into a float32 (h, w, c) array in [0, 1].

    Grayscale files are channel-replicated to match an RGB dataset; any
    other shape mismatch is an error.
    """
    path = getattr(path_or_instance, "resolved_path", path_or_instance)
    with Image.open(path) as img:
        arr = np.asarray(img)
    h, w, c = image_shape
    if arr.ndim == 2:
        arr = np.repeat(arr[:, :, None], c, axis=2)
    if arr.shape != (h, w, c):
        raise ValidationError(
            f"image '{os.path.basename(str(path))}' has shape {arr.shape}, expected {(h, w, c)}",
            subject=str(path),
        )
    return (arr.astype(np.float32) / 255.0).clip(0.0, 1.0)


def compute_channel_means(manifest: DatasetManifest) -> np.ndarray:
    """Per-channel mean over the probe split, cached on the manifest.

    Accumulates in float64 over instances in manifest order so repeated
    computations agree to well under 1e-9.
    """
    if manifest._channel_means is not None:
        return manifest._channel_means
    probe = manifest.split_instances("probe")
    if not probe:
        raise EmptyClassError("manifest has no probe instances")
    total = np.zeros(manifest.image_shape[2], dtype=np.float64)
    for inst in probe:
        image = load_image(inst, manifest.image_shape)
        total += image.astype(np.float64).mean(axis=(0, 1))
    means = total / len(probe)
    manifest._channel_means = means
    return means
