"""Export jobs: planted fixtures and torch-model conversion.

Both paths emit exactly the dataset and model interchange formats the
engine loads, so every artifact written here round-trips through the
engine's own validation.
"""

import os
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from concept_probe.model import LayerSpec, ModelGraph, forward, save_model
from concept_probe.planted import FixturePaths
from concept_probe.planted import build_planted_fixture as _build_planted


class ConversionError(Exception):
    """The source model cannot be expressed in the interchange format."""


@dataclass
class ParityReport:
    n_inputs: int
    max_abs_logit_diff: float
    per_input_diffs: list[float] = field(default_factory=list)


@dataclass
class ExportJob:
    source: str  # "planted" | "trained"
    output_dir: str
    seed: int = 0
    model: "nn.Sequential | None" = None
    norm_mean: tuple[float, ...] = (0.0,)
    norm_std: tuple[float, ...] = (1.0,)
    input_shape: tuple[int, int, int] | None = None
    class_names: list[str] | None = None

    def run(self):
        if self.source == "planted":
            return build_planted_fixture(self.output_dir, self.seed)
        if self.source == "trained":
            if self.model is None or self.input_shape is None or self.class_names is None:
                raise ConversionError("trained export needs model, input_shape, and class_names")
            return convert_trained(
                self.model,
                self.output_dir,
                input_shape=self.input_shape,
                norm_mean=self.norm_mean,
                norm_std=self.norm_std,
                class_names=self.class_names,
                seed=self.seed,
            )
        raise ConversionError(f"unknown export source '{self.source}'")


def build_planted_fixture(output_dir: str, seed: int = 0) -> FixturePaths:
    """Desk-scale fixture: dataset + hand-set model + motif oracle, all in
    the interchange formats and deterministic under the seed."""
    return _build_planted(output_dir, seed=seed)


def _chw_to_hwc_permutation(c: int, h: int, w: int) -> np.ndarray:
    """Index map from torch's flatten order (C, H, W) to the engine's
    row-major (H, W, C) order."""
    idx = np.arange(c * h * w).reshape(c, h, w)
    return np.transpose(idx, (1, 2, 0)).reshape(-1)


def convert_trained(
    model: nn.Sequential,
    output_dir: str,
    input_shape: tuple[int, int, int],
    norm_mean: tuple[float, ...],
    norm_std: tuple[float, ...],
    class_names: list[str],
    seed: int = 0,
    n_parity_inputs: int = 8,
) -> tuple[str, ParityReport]:
    """Export a sequential torch model layer by layer and verify numerical
    parity on random inputs.

    Only models built from Conv2d / ReLU / MaxPool2d / AdaptiveAvgPool2d(1) /
    Flatten / Linear convert; anything else (including any non-sequential
    topology, which is how residual connections arrive) is refused by name.
    """
    if not isinstance(model, nn.Sequential):
        raise ConversionError(
            f"only nn.Sequential converts; {type(model).__name__} implies a "
            "non-linear topology (residual or branched) the format cannot express"
        )
    if len(model) == 0:
        raise ConversionError("empty model")

    h, w, c = input_shape
    layers: list[LayerSpec] = []
    shape = (h, w, c)  # engine-order running shape
    for index, module in enumerate(model):
        name = f"layer{index}_{type(module).__name__.lower()}"
        if isinstance(module, nn.Conv2d):
            if module.dilation != (1, 1) or module.groups != 1:
                raise ConversionError(f"{name}: dilation/groups unsupported")
            if module.stride[0] != module.stride[1] or module.padding[0] != module.padding[1]:
                raise ConversionError(f"{name}: anisotropic stride/padding unsupported")
            weight = module.weight.detach().numpy()  # (out, in, kh, kw)
            bias = (
                module.bias.detach().numpy()
                if module.bias is not None
                else np.zeros(weight.shape[0], dtype=np.float32)
            )
            layers.append(
                LayerSpec(
                    name=name,
                    kind="convolution",
                    stride=int(module.stride[0]),
                    padding=int(module.padding[0]),
                    weight=np.ascontiguousarray(np.transpose(weight, (2, 3, 1, 0))).astype(
                        np.float32
                    ),
                    bias=bias.astype(np.float32),
                )
            )
            kh = module.kernel_size[0]
            oh = (shape[0] + 2 * module.padding[0] - kh) // module.stride[0] + 1
            ow = (shape[1] + 2 * module.padding[1] - module.kernel_size[1]) // module.stride[1] + 1
            shape = (oh, ow, weight.shape[0])
        elif isinstance(module, nn.ReLU):
            layers.append(LayerSpec(name=name, kind="relu"))
        elif isinstance(module, nn.MaxPool2d):
            k = module.kernel_size if isinstance(module.kernel_size, int) else module.kernel_size[0]
            s = module.stride if isinstance(module.stride, int) else module.stride[0]
            if module.padding not in (0, (0, 0)):
                raise ConversionError(f"{name}: padded pooling unsupported")
            layers.append(LayerSpec(name=name, kind="maxpool", window=int(k), stride=int(s)))
            shape = ((shape[0] - k) // s + 1, (shape[1] - k) // s + 1, shape[2])
        elif isinstance(module, nn.AdaptiveAvgPool2d):
            if module.output_size not in (1, (1, 1)):
                raise ConversionError(f"{name}: only global average pooling converts")
            layers.append(LayerSpec(name=name, kind="global-average-pool"))
            shape = (shape[2],)
        elif isinstance(module, nn.Flatten):
            entering = shape
            layers.append(LayerSpec(name=name, kind="flatten"))
            shape = (int(np.prod(shape)),)
            flatten_entering = entering
        elif isinstance(module, nn.Linear):
            weight = module.weight.detach().numpy()  # (out, in)
            bias = (
                module.bias.detach().numpy()
                if module.bias is not None
                else np.zeros(weight.shape[0], dtype=np.float32)
            )
            w_engine = weight.T  # (in, out)
            previous = layers[-1] if layers else None
            if previous is not None and previous.kind == "flatten" and len(flatten_entering) == 3:
                # torch flattened channel-first; engine row j holds the
                # feature torch kept at index perm[j], so reorder the rows
                fh, fw, fc = flatten_entering
                perm = _chw_to_hwc_permutation(fc, fh, fw)
                w_engine = weight.T[perm]
            layers.append(
                LayerSpec(
                    name=name,
                    kind="dense",
                    weight=np.ascontiguousarray(w_engine).astype(np.float32),
                    bias=bias.astype(np.float32),
                )
            )
            shape = (weight.shape[0],)
        else:
            raise ConversionError(f"unsupported layer {name}")

    graph = ModelGraph(
        layers=layers,
        input_shape=input_shape,
        norm_mean=np.asarray(norm_mean, dtype=np.float64),
        norm_std=np.asarray(norm_std, dtype=np.float64),
        class_names=list(class_names),
    )

    rng = np.random.default_rng(seed)
    diffs = []
    model.eval()
    with torch.no_grad():
        for _ in range(n_parity_inputs):
            image = rng.random((h, w, c)).astype(np.float32)
            normalized = (image - np.asarray(norm_mean, dtype=np.float32)) / np.asarray(
                norm_std, dtype=np.float32
            )
            torch_in = torch.from_numpy(np.transpose(normalized, (2, 0, 1))[None])
            torch_logits = model(torch_in).numpy().ravel()
            pred, _ = forward(graph, image.astype(np.float64), layers[0].name)
            diffs.append(float(np.abs(pred.logits - torch_logits).max()))

    model_dir = os.path.join(output_dir, "model")
    save_model(graph, model_dir)
    report = ParityReport(
        n_inputs=n_parity_inputs, max_abs_logit_diff=max(diffs), per_input_diffs=diffs
    )
    return model_dir, report
