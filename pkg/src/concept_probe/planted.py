"""Desk-scale planted fixture: a 3-class dataset with known visual motifs
and a 6-layer CNN whose filters are hand-set to detect them.

Classes: "striped" (diagonal stripes), "spotted" (a dot lattice), and
"plain" (a texture-free panel). Every image sits on one of two shared
background textures (vertical or horizontal grating) so that background
concepts recur across classes. A sidecar ``oracle.json`` records, per
instance, the motif kind, the motif bounding box, and the background
texture, which lets tests label any segment mask by majority overlap.

The dense head is calibrated on the generated probe images so that clean
eval images classify correctly with confidence > 0.8, while a few
low-contrast eval images per motif class fall back to "plain".
"""

import json
import math
import os
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .data import DatasetManifest, InstanceMeta, load_image, save_manifest
from .model import LayerSpec, ModelGraph, forward, forward_batch, save_model
from .seeding import derived_rng

CLASS_NAMES = ["striped", "spotted", "plain"]
MOTIFS = {"striped": "stripe", "spotted": "dot", "plain": "flat"}

IMAGE_SIZE = 32
MOTIF_SIDES = (14, 16, 18, 20)  # varied per instance: diversifies gradients
STRIPE_PERIOD = 8  # 4-px diagonal bands, in absolute image coordinates
DOT_SPACING = 4  # dot lattice in absolute coordinates, one dot per conv cell
DOT_RADIUS = 1.4
TEX_PERIOD = 16  # slow gratings: the coarse superpixel scale must not fragment
MOTIF_AMP = 0.30
TEX_AMP = 0.12
HARD_AMP_SCALE = 0.12
SUPPRESSION = 0.8  # cross-channel inhibition applied by conv2

N_PROBE = 50
N_EVAL = 30
N_HARD_EVAL = 4  # low-contrast eval images per motif class

TINT_A = np.array([0.92, 0.98, 1.08])
TINT_B = np.array([1.08, 1.00, 0.92])

MARGIN = 2.5  # logit gap; softmax confidence > 0.8 needs ~2.1

CAPTURE_LAYER = "relu1"


@dataclass
class FixturePaths:
    dataset_json: str
    model_dir: str
    oracle_json: str


def _texture(kind: str, phase: int, h: int, w: int) -> np.ndarray:
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    if kind == "A":
        lum = TEX_AMP * np.cos(2 * np.pi * (xs + phase) / TEX_PERIOD)
        tint = TINT_A
    else:
        lum = TEX_AMP * np.cos(2 * np.pi * (ys + phase) / TEX_PERIOD)
        tint = TINT_B
    return 0.5 * tint[None, None, :] + lum[:, :, None]


def _paint_motif(image: np.ndarray, motif: str, box: tuple[int, int, int, int], amp: float) -> None:
    """Motif patterns live in absolute image coordinates; the box only
    clips them, so the model's stride-4 cells see a stable phase no matter
    where the box lands."""
    top, left, side, _ = box
    ys, xs = np.mgrid[top : top + side, left : left + side].astype(np.float64)
    if motif == "stripe":
        panel = 0.5 + amp * np.sign(np.cos(2 * np.pi * (ys + xs) / STRIPE_PERIOD))
    elif motif == "dot":
        ry = ys % DOT_SPACING
        rx = xs % DOT_SPACING
        dy = np.minimum(ry, DOT_SPACING - ry)
        dx = np.minimum(rx, DOT_SPACING - rx)
        inside = dy**2 + dx**2 <= DOT_RADIUS**2
        panel = 0.5 + amp * np.where(inside, 1.0, -0.45)
    else:  # flat
        panel = np.full((side, side), 0.5)
    image[top : top + side, left : left + side, :] = panel[:, :, None]


def _render_instance(
    motif: str, texture: str, phase: int, jitter: tuple[int, int], side: int, amp: float, rng
) -> tuple[np.ndarray, tuple[int, int, int, int]]:
    image = _texture(texture, phase, IMAGE_SIZE, IMAGE_SIZE)
    base = (IMAGE_SIZE - side) // 2
    box = (base + jitter[0], base + jitter[1], side, side)
    _paint_motif(image, motif, box, amp)
    image += rng.uniform(-0.02, 0.02)
    image += rng.normal(0.0, 0.008, size=image.shape)
    return np.clip(image, 0.02, 0.98), box


def _quantize(image: np.ndarray) -> np.ndarray:
    """Round-trip through uint8 so calibration sees exactly what PNG loads."""
    return (np.round(image * 255.0).astype(np.uint8).astype(np.float32)) / 255.0


# -- filter bank ---------------------------------------------------------


def _unit(kernel: np.ndarray) -> np.ndarray:
    kernel = kernel - kernel.mean()
    return kernel / np.linalg.norm(kernel)


# channel roles in conv1/conv2
CH_STRIPE_POS = 0  # diagonal grating, one phase
CH_STRIPE_NEG = 1  # the opposite phase (the stride-4 cells alternate)
CH_DOT = 2
CH_TEX_A = 3
CH_TEX_B = 4
CH_BRIGHT = 5
CH_OPPONENT = 6
CH_EDGE = 7


def _filter_bank() -> np.ndarray:
    """(5, 5, 3, 8) hand-set filters; see the CH_* roles above."""
    ys, xs = np.mgrid[0:5, 0:5].astype(np.float64)
    bank = np.zeros((5, 5, 3, 8))

    lum = np.ones(3) / 3.0

    stripe = _unit(np.cos(2 * np.pi * (ys + xs) / STRIPE_PERIOD))
    bank[:, :, :, CH_STRIPE_POS] = stripe[:, :, None] * lum[None, None, :]
    bank[:, :, :, CH_STRIPE_NEG] = -stripe[:, :, None] * lum[None, None, :]

    r2 = (ys - 2.0) ** 2 + (xs - 2.0) ** 2
    dog = np.exp(-r2 / (2 * 0.7**2)) - 0.30 * np.exp(-r2 / (2 * 1.6**2))
    bank[:, :, :, CH_DOT] = _unit(dog)[:, :, None] * lum[None, None, :]

    tex_a = _unit(np.cos(2 * np.pi * xs / TEX_PERIOD))
    bank[:, :, :, CH_TEX_A] = tex_a[:, :, None] * lum[None, None, :]

    tex_b = _unit(np.cos(2 * np.pi * ys / TEX_PERIOD))
    bank[:, :, :, CH_TEX_B] = tex_b[:, :, None] * lum[None, None, :]

    brightness = np.ones((5, 5)) / 5.0
    bank[:, :, :, CH_BRIGHT] = brightness[:, :, None] * lum[None, None, :]

    window = np.ones((5, 5)) / 5.0
    bank[:, :, 0, CH_OPPONENT] = window
    bank[:, :, 1, CH_OPPONENT] = -window

    sobel = np.array([[1, 2, 0, -2, -1]] * 5, dtype=np.float64)
    bank[:, :, :, CH_EDGE] = _unit(sobel)[:, :, None] * lum[None, None, :]
    return bank


def build_planted_fixture(output_dir: str, seed: int = 0) -> FixturePaths:
    """Generate the dataset, calibrate and save the model, and write the
    motif oracle. Deterministic: a fixed seed reproduces identical bytes."""
    rng = derived_rng("planted_fixture", seed)
    os.makedirs(output_dir, exist_ok=True)
    dataset_dir = os.path.join(output_dir, "dataset")
    images_dir = os.path.join(dataset_dir, "images")
    model_dir = os.path.join(output_dir, "model")
    os.makedirs(images_dir, exist_ok=True)

    jitter_steps = (-5, 0, 5)  # patterns are absolute, boxes can land anywhere
    instances: list[InstanceMeta] = []
    arrays: dict[str, np.ndarray] = {}
    oracle: dict = {"motifs": {}, "motif_boxes": {}, "textures": {}, "tex_phases": {}, "hard": []}

    for label, class_name in enumerate(CLASS_NAMES):
        motif = MOTIFS[class_name]
        for split, count in (("probe", N_PROBE), ("eval", N_EVAL)):
            for i in range(count):
                iid = f"{class_name}_{split}_{i:03d}"
                hard = split == "eval" and motif != "flat" and i >= count - N_HARD_EVAL
                amp = MOTIF_AMP * (HARD_AMP_SCALE if hard else 1.0)
                texture = "A" if rng.random() < 0.5 else "B"
                phase = int(TEX_PERIOD // 2) if rng.random() < 0.5 else 0
                jitter = (
                    jitter_steps[int(rng.integers(3))],
                    jitter_steps[int(rng.integers(3))],
                )
                side = MOTIF_SIDES[int(rng.integers(len(MOTIF_SIDES)))]
                image, box = _render_instance(motif, texture, phase, jitter, side, amp, rng)
                image = _quantize(image)
                rel = os.path.join("images", f"{iid}.png")
                Image.fromarray(np.round(image * 255.0).astype(np.uint8)).save(
                    os.path.join(dataset_dir, rel)
                )
                arrays[iid] = image
                instances.append(InstanceMeta(instance_id=iid, path=rel, label=label, split=split))
                oracle["motifs"][iid] = motif
                oracle["motif_boxes"][iid] = list(box)
                oracle["textures"][iid] = texture
                oracle["tex_phases"][iid] = phase
                if hard:
                    oracle["hard"].append(iid)

    manifest = DatasetManifest(
        class_names=list(CLASS_NAMES),
        image_shape=(IMAGE_SIZE, IMAGE_SIZE, 3),
        instances=instances,
        root=dataset_dir,
    )
    dataset_json = os.path.join(dataset_dir, "dataset.json")
    save_manifest(manifest, dataset_json)

    model = _build_model(arrays, instances)
    save_model(model, model_dir)

    oracle_json = os.path.join(output_dir, "oracle.json")
    with open(oracle_json, "w", encoding="utf-8") as fh:
        json.dump(oracle, fh, indent=1, sort_keys=True)

    _verify_fixture(model, manifest, arrays, oracle)
    return FixturePaths(dataset_json=dataset_json, model_dir=model_dir, oracle_json=oracle_json)


def _build_model(arrays: dict[str, np.ndarray], instances: list[InstanceMeta]) -> ModelGraph:
    bank = _filter_bank()

    probe_by_class: dict[int, list[np.ndarray]] = {}
    for inst in instances:
        if inst.split == "probe":
            probe_by_class.setdefault(inst.label, []).append(arrays[inst.instance_id])

    # stage 1: unit-gain conv to measure per-channel response scales
    stage = _assemble(bank, np.ones(8), np.zeros(8), np.zeros((8, 3)), np.zeros(3))
    sample = np.stack([img for imgs in probe_by_class.values() for img in imgs])
    _, acts = forward_batch(stage, sample, "relu1")
    gains = np.empty(8)
    for c in range(8):
        q95 = float(np.quantile(acts[:, :, :, c], 0.95))
        gains[c] = 2.0 / max(q95, 1e-6)

    # stage 2: thresholds halfway up the strong post-mix responses, which
    # silences residual cross-talk and image noise at relu2
    stage = _assemble(bank, gains, np.zeros(8), np.zeros((8, 3)), np.zeros(3))
    _, mixed = forward_batch(stage, sample, "conv2")
    theta = np.array(
        [0.5 * float(np.quantile(np.maximum(mixed[:, :, :, c], 0.0), 0.98)) for c in range(8)]
    )

    stage_t = _assemble(bank, gains, theta, np.zeros((8, 3)), np.zeros(3))
    feats_by_class = {}
    for label, imgs in probe_by_class.items():
        _, feats = forward_batch(stage_t, np.stack(imgs), "gap")
        feats_by_class[label] = feats

    # head weights from measured per-image features: own-motif weight a,
    # opposing-motif weight -d, identical background weight g everywhere
    # (the confound influences every logit without separating any class)
    ratio = 0.15
    striped, spotted, _plain = (feats_by_class[k] for k in (0, 1, 2))
    stripe_feat = striped[:, CH_STRIPE_POS] + striped[:, CH_STRIPE_NEG]
    stripe_dot = striped[:, CH_DOT]
    dot_feat = spotted[:, CH_DOT]
    dot_stripe = spotted[:, CH_STRIPE_POS] + spotted[:, CH_STRIPE_NEG]
    own_vs_plain = min(
        float(np.quantile(stripe_feat - ratio * stripe_dot, 0.05)),
        float(np.quantile(dot_feat - ratio * dot_stripe, 0.05)),
    )
    separation = min(
        float(np.quantile(stripe_feat - stripe_dot, 0.05)),
        float(np.quantile(dot_feat - dot_stripe, 0.05)),
    )
    if own_vs_plain <= 0.05 or separation <= 0.05:
        raise AssertionError(
            f"motif features do not separate (own_vs_plain={own_vs_plain:.3f}, "
            f"separation={separation:.3f})"
        )
    a = max(2.2 * MARGIN / own_vs_plain, 1.1 * MARGIN / ((1 + ratio) * separation))
    d = ratio * a
    tex_level = float(
        np.mean([f[:, CH_TEX_A] + f[:, CH_TEX_B] for f in feats_by_class.values()])
    )
    g = 0.8 / max(tex_level, 1e-6)

    w_head = np.zeros((8, 3))
    for stripe_ch in (CH_STRIPE_POS, CH_STRIPE_NEG):
        w_head[stripe_ch, 0] = a
        w_head[stripe_ch, 1] = -d
        w_head[stripe_ch, 2] = -d
    w_head[CH_DOT, 0] = -d
    w_head[CH_DOT, 1] = a
    w_head[CH_DOT, 2] = -d
    w_head[CH_TEX_A, :] = g
    w_head[CH_TEX_B, :] = g
    b_head = np.array([0.0, 0.0, MARGIN])

    return _assemble(bank, gains, theta, w_head, b_head)


def _channel_mix() -> np.ndarray:
    """conv2 center-tap mixing (mix[cin, cout]): each motif inhibits the
    other motif's channel, and both inhibit the texture channels, so relu2
    only passes a channel where its own pattern clearly dominates."""
    mix = np.eye(8)
    for stripe_ch in (CH_STRIPE_POS, CH_STRIPE_NEG):
        mix[CH_DOT, stripe_ch] = -SUPPRESSION
        mix[stripe_ch, CH_DOT] = -SUPPRESSION
        mix[stripe_ch, CH_TEX_A] = -SUPPRESSION
        mix[stripe_ch, CH_TEX_B] = -SUPPRESSION
    mix[CH_DOT, CH_TEX_A] = -SUPPRESSION
    mix[CH_DOT, CH_TEX_B] = -SUPPRESSION
    return mix


def _assemble(
    bank: np.ndarray, gains: np.ndarray, theta: np.ndarray, w_head: np.ndarray, b_head: np.ndarray
) -> ModelGraph:
    conv1 = (bank * gains[None, None, None, :]).astype(np.float32)
    mix = _channel_mix()
    delta = np.zeros((3, 3, 8, 8), dtype=np.float32)
    for cin in range(8):
        for cout in range(8):
            delta[1, 1, cin, cout] = mix[cin, cout]
    layers = [
        LayerSpec(name="conv1", kind="convolution", stride=4, padding=2, weight=conv1,
                  bias=np.zeros(8, dtype=np.float32)),
        LayerSpec(name="relu1", kind="relu"),
        LayerSpec(name="conv2", kind="convolution", stride=1, padding=1, weight=delta,
                  bias=(-theta).astype(np.float32)),
        LayerSpec(name="relu2", kind="relu"),
        LayerSpec(name="gap", kind="global-average-pool"),
        LayerSpec(name="head", kind="dense", weight=w_head.astype(np.float32),
                  bias=b_head.astype(np.float32)),
    ]
    return ModelGraph(
        layers=layers,
        input_shape=(IMAGE_SIZE, IMAGE_SIZE, 3),
        norm_mean=np.full(3, 0.5),
        norm_std=np.full(3, 0.25),
        class_names=list(CLASS_NAMES),
    )


def _verify_fixture(model, manifest, arrays, oracle) -> None:
    """Build-time check: clean eval images classify correctly with
    confidence > 0.8; hard ones drop to 'plain'."""
    for inst in manifest.instances:
        if inst.split != "eval":
            continue
        pred, _ = forward(model, arrays[inst.instance_id], CAPTURE_LAYER)
        if inst.instance_id in set(oracle["hard"]):
            continue
        if pred.predicted_class != inst.label or pred.confidence <= 0.8:
            raise AssertionError(
                f"fixture calibration failed on {inst.instance_id}: "
                f"predicted {pred.predicted_class} at {pred.confidence:.3f}"
            )


# -- oracle helpers (used by tests) ---------------------------------------


def load_oracle(path: str) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def segment_motif_label(mask: np.ndarray, instance_id: str, oracle: dict) -> str:
    """'stripe' / 'dot' / 'flat' when more than half of the mask overlaps
    the instance's motif box, else 'background'."""
    top, left, side_h, side_w = oracle["motif_boxes"][instance_id]
    box = np.zeros_like(mask)
    box[top : top + side_h, left : left + side_w] = True
    overlap = float((mask & box).sum()) / float(mask.sum())
    return oracle["motifs"][instance_id] if overlap > 0.5 else "background"
