"""Feed-forward CNN runtime: load/save, forward with activation capture,
and gradients of a class logit with respect to a named layer's activations.

Supported layer kinds: convolution (stride / zero padding), relu, maxpool,
global-average-pool, flatten, dense. Activations are held as (h, w, c) or
flat (d,) float64 arrays; weights are stored float32 and promoted to
float64 once at load so all arithmetic accumulates in double precision.
"""

import io
import json
import os
import zipfile
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import as_strided

from ._blob import read_blob, write_blob
from .errors import (
    FormatError,
    LayerLookupError,
    ParameterError,
    UnsupportedLayerError,
    ValidationError,
)

LAYER_KINDS = ("convolution", "relu", "maxpool", "global-average-pool", "flatten", "dense")

MODEL_JSON = "model.json"
TENSORS_BIN = "tensors.bin"


@dataclass
class LayerSpec:
    name: str
    kind: str
    stride: int = 1
    padding: int = 0
    window: int = 0
    weight: np.ndarray | None = None  # conv: (kh, kw, cin, cout); dense: (fan_in, fan_out)
    bias: np.ndarray | None = None


@dataclass
class Prediction:
    instance_id: str
    logits: np.ndarray
    probabilities: np.ndarray
    predicted_class: int
    confidence: float


@dataclass
class ModelGraph:
    layers: list[LayerSpec]
    input_shape: tuple[int, int, int]
    norm_mean: np.ndarray
    norm_std: np.ndarray
    class_names: list[str]
    # float64 copies of the weights, built once in __post_init__
    _w64: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict, repr=False)
    _shapes: list[tuple[int, ...]] = field(default_factory=list, repr=False)
    _index: dict[str, int] = field(default_factory=dict, repr=False)

    def __post_init__(self) -> None:
        self._validate()
        for layer in self.layers:
            if layer.weight is not None:
                self._w64[layer.name] = (
                    layer.weight.astype(np.float64),
                    layer.bias.astype(np.float64),
                )

    # -- structure -----------------------------------------------------

    def _validate(self) -> None:
        names = [layer.name for layer in self.layers]
        if len(set(names)) != len(names):
            dup = next(n for n in names if names.count(n) > 1)
            raise ValidationError(f"duplicate layer name '{dup}'", subject=dup)
        if not self.layers or self.layers[-1].kind != "dense":
            raise ValidationError("model must end in a dense layer", subject="<terminal>")
        self._index = {name: i for i, name in enumerate(names)}

        shape: tuple[int, ...] = tuple(self.input_shape)
        shapes = []
        for layer in self.layers:
            shape = _output_shape(layer, shape)
            shapes.append(shape)
        self._shapes = shapes
        n_out = shapes[-1][0]
        if n_out != len(self.class_names):
            raise ValidationError(
                f"terminal dense width {n_out} != {len(self.class_names)} classes",
                subject=self.layers[-1].name,
            )
        if self.norm_mean.shape != (self.input_shape[2],) or self.norm_std.shape != (
            self.input_shape[2],
        ):
            raise ValidationError("normalization must be per input channel", subject="<norm>")

    def layer_index(self, name: str) -> int:
        if name not in self._index:
            raise LayerLookupError(f"no layer named '{name}'")
        return self._index[name]

    def layer_output_shape(self, name: str) -> tuple[int, ...]:
        return self._shapes[self.layer_index(name)]

    @property
    def n_classes(self) -> int:
        return len(self.class_names)


def _output_shape(layer: LayerSpec, shape: tuple[int, ...]) -> tuple[int, ...]:
    kind = layer.kind
    if kind == "convolution":
        if len(shape) != 3:
            raise ValidationError(f"convolution '{layer.name}' needs a 3-d input", layer.name)
        h, w, c = shape
        if layer.weight is None or layer.weight.ndim != 4:
            raise ValidationError(f"convolution '{layer.name}' needs a 4-d weight", layer.name)
        kh, kw, cin, cout = layer.weight.shape
        if cin != c:
            raise ValidationError(
                f"convolution '{layer.name}' fan-in {cin} != input channels {c}", layer.name
            )
        if layer.bias is None or layer.bias.shape != (cout,):
            raise ValidationError(f"convolution '{layer.name}' bias must be ({cout},)", layer.name)
        if layer.stride < 1:
            raise ValidationError(f"convolution '{layer.name}' stride must be >= 1", layer.name)
        oh = (h + 2 * layer.padding - kh) // layer.stride + 1
        ow = (w + 2 * layer.padding - kw) // layer.stride + 1
        if oh < 1 or ow < 1:
            raise ValidationError(f"convolution '{layer.name}' output collapses", layer.name)
        return (oh, ow, cout)
    if kind == "relu":
        return shape
    if kind == "maxpool":
        if len(shape) != 3:
            raise ValidationError(f"maxpool '{layer.name}' needs a 3-d input", layer.name)
        if layer.window < 1 or layer.stride < 1:
            raise ValidationError(f"maxpool '{layer.name}' window/stride must be >= 1", layer.name)
        h, w, c = shape
        oh = (h - layer.window) // layer.stride + 1
        ow = (w - layer.window) // layer.stride + 1
        if oh < 1 or ow < 1:
            raise ValidationError(f"maxpool '{layer.name}' output collapses", layer.name)
        return (oh, ow, c)
    if kind == "global-average-pool":
        if len(shape) != 3:
            raise ValidationError(f"global-average-pool '{layer.name}' needs a 3-d input", layer.name)
        return (shape[2],)
    if kind == "flatten":
        return (int(np.prod(shape)),)
    if kind == "dense":
        if len(shape) != 1:
            raise ValidationError(f"dense '{layer.name}' needs a flat input", layer.name)
        if layer.weight is None or layer.weight.ndim != 2:
            raise ValidationError(f"dense '{layer.name}' needs a 2-d weight", layer.name)
        fan_in, fan_out = layer.weight.shape
        if fan_in != shape[0]:
            raise ValidationError(
                f"dense '{layer.name}' fan-in {fan_in} != input width {shape[0]}", layer.name
            )
        if layer.bias is None or layer.bias.shape != (fan_out,):
            raise ValidationError(f"dense '{layer.name}' bias must be ({fan_out},)", layer.name)
        return (fan_out,)
    raise ValidationError(f"unknown layer kind '{kind}'", layer.name)


# -- kernels -----------------------------------------------------------


def _conv_windows(x: np.ndarray, kh: int, kw: int, stride: int, padding: int) -> np.ndarray:
    """Strided (oh, ow, kh, kw, c) window view of a zero-padded (h, w, c) input."""
    if padding:
        x = np.pad(x, ((padding, padding), (padding, padding), (0, 0)))
    h, w, c = x.shape
    oh = (h - kh) // stride + 1
    ow = (w - kw) // stride + 1
    sh, sw, sc = x.strides
    return as_strided(
        x,
        shape=(oh, ow, kh, kw, c),
        strides=(sh * stride, sw * stride, sh, sw, sc),
        writeable=False,
    )


def _layer_forward(model: ModelGraph, layer: LayerSpec, x: np.ndarray) -> np.ndarray:
    kind = layer.kind
    if kind == "convolution":
        w64, b64 = model._w64[layer.name]
        view = _conv_windows(x, w64.shape[0], w64.shape[1], layer.stride, layer.padding)
        return np.tensordot(view, w64, axes=([2, 3, 4], [0, 1, 2])) + b64
    if kind == "relu":
        return np.maximum(x, 0.0)
    if kind == "maxpool":
        view = _conv_windows(x, layer.window, layer.window, layer.stride, 0)
        return view.max(axis=(2, 3))
    if kind == "global-average-pool":
        return x.mean(axis=(0, 1))
    if kind == "flatten":
        return x.reshape(-1)
    if kind == "dense":
        w64, b64 = model._w64[layer.name]
        return x @ w64 + b64
    raise ValidationError(f"unknown layer kind '{kind}'", layer.name)


def _layer_backward(
    model: ModelGraph, layer: LayerSpec, x: np.ndarray, dy: np.ndarray
) -> np.ndarray:
    """Vector-Jacobian product: gradient w.r.t. the layer input given the
    cached input ``x`` and the gradient ``dy`` w.r.t. the layer output."""
    kind = layer.kind
    if kind == "convolution":
        w64, _ = model._w64[layer.name]
        kh, kw, cin, cout = w64.shape
        s, p = layer.stride, layer.padding
        oh, ow = dy.shape[0], dy.shape[1]
        dxp = np.zeros((x.shape[0] + 2 * p, x.shape[1] + 2 * p, cin))
        # (oh, ow, kh, kw, cin) contributions, scattered back per kernel slot
        dcols = np.tensordot(dy, w64, axes=([2], [3]))
        for i in range(kh):
            for j in range(kw):
                dxp[i : i + s * oh : s, j : j + s * ow : s, :] += dcols[:, :, i, j, :]
        if p:
            return dxp[p:-p, p:-p, :]
        return dxp
    if kind == "relu":
        return dy * (x > 0)
    if kind == "maxpool":
        win, s = layer.window, layer.stride
        view = _conv_windows(x, win, win, s, 0)
        oh, ow, _, _, c = view.shape
        flat = view.reshape(oh, ow, win * win, c)
        arg = flat.argmax(axis=2)
        dx = np.zeros_like(x)
        oi, oj, ci = np.meshgrid(
            np.arange(oh), np.arange(ow), np.arange(c), indexing="ij"
        )
        rows = oi * s + arg // win
        cols = oj * s + arg % win
        # overlapping windows can route multiple outputs to one input cell
        np.add.at(dx, (rows.ravel(), cols.ravel(), ci.ravel()), dy.ravel())
        return dx
    if kind == "global-average-pool":
        h, w, _ = x.shape
        return np.broadcast_to(dy / (h * w), x.shape).copy()
    if kind == "flatten":
        return dy.reshape(x.shape)
    if kind == "dense":
        w64, _ = model._w64[layer.name]
        return w64 @ dy
    raise ValidationError(f"unknown layer kind '{kind}'", layer.name)


# -- public operations -------------------------------------------------


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max()
    e = np.exp(z)
    return e / e.sum()


def normalize_input(model: ModelGraph, image: np.ndarray) -> np.ndarray:
    if tuple(image.shape) != tuple(model.input_shape):
        raise ParameterError(
            f"image shape {tuple(image.shape)} != model input {tuple(model.input_shape)}"
        )
    return (image.astype(np.float64) - model.norm_mean.astype(np.float64)) / model.norm_std.astype(
        np.float64
    )


def forward(
    model: ModelGraph, image: np.ndarray, capture_layer: str, instance_id: str = ""
) -> tuple[Prediction, np.ndarray]:
    """Run the model on one raw [0,1] image, capturing one layer's output."""
    capture_idx = model.layer_index(capture_layer)
    x = normalize_input(model, image)
    captured = None
    for i, layer in enumerate(model.layers):
        x = _layer_forward(model, layer, x)
        if i == capture_idx:
            captured = x.copy()
    logits = x
    probs = softmax(logits)
    k = int(np.argmax(logits))
    pred = Prediction(
        instance_id=instance_id,
        logits=logits,
        probabilities=probs,
        predicted_class=k,
        confidence=float(probs[k]),
    )
    return pred, captured


def forward_batch(
    model: ModelGraph, images: np.ndarray, capture_layer: str | None = None
) -> tuple[np.ndarray, np.ndarray | None]:
    """Vectorized forward over (n, h, w, c) images.

    Returns (logits (n, k), captured activations (n, ...) or None). Agrees
    with `forward` to floating round-off (BLAS may reduce batched products
    in a different order); repeated calls on the same batch are identical.
    """
    capture_idx = model.layer_index(capture_layer) if capture_layer is not None else -1
    n = images.shape[0]
    if images.shape[1:] != tuple(model.input_shape):
        raise ParameterError("batch images do not match model input shape")
    x = (images.astype(np.float64) - model.norm_mean) / model.norm_std
    captured = None
    for i, layer in enumerate(model.layers):
        x = _batch_layer_forward(model, layer, x)
        if i == capture_idx:
            captured = x.copy()
    return x.reshape(n, -1), captured


def _batch_layer_forward(model: ModelGraph, layer: LayerSpec, x: np.ndarray) -> np.ndarray:
    kind = layer.kind
    if kind == "convolution":
        w64, b64 = model._w64[layer.name]
        kh, kw = w64.shape[0], w64.shape[1]
        p, s = layer.padding, layer.stride
        if p:
            x = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
        nb, h, w, c = x.shape
        oh = (h - kh) // s + 1
        ow = (w - kw) // s + 1
        sn, sh, sw, sc = x.strides
        view = as_strided(
            x,
            shape=(nb, oh, ow, kh, kw, c),
            strides=(sn, sh * s, sw * s, sh, sw, sc),
            writeable=False,
        )
        return np.tensordot(view, w64, axes=([3, 4, 5], [0, 1, 2])) + b64
    if kind == "relu":
        return np.maximum(x, 0.0)
    if kind == "maxpool":
        win, s = layer.window, layer.stride
        nb, h, w, c = x.shape
        oh = (h - win) // s + 1
        ow = (w - win) // s + 1
        sn, sh, sw, sc = x.strides
        view = as_strided(
            x,
            shape=(nb, oh, ow, win, win, c),
            strides=(sn, sh * s, sw * s, sh, sw, sc),
            writeable=False,
        )
        return view.max(axis=(3, 4))
    if kind == "global-average-pool":
        return x.mean(axis=(1, 2))
    if kind == "flatten":
        return x.reshape(x.shape[0], -1)
    if kind == "dense":
        w64, b64 = model._w64[layer.name]
        return x @ w64 + b64
    raise ValidationError(f"unknown layer kind '{kind}'", layer.name)


def gradient_from_activation(
    model: ModelGraph, layer: str, activation: np.ndarray, class_k: int
) -> np.ndarray:
    """d logit_k / d activation, as a function of the layers strictly above
    ``layer`` and the given activation value only."""
    idx = model.layer_index(layer)
    if idx == len(model.layers) - 1:
        raise UnsupportedLayerError("cannot differentiate the terminal logits against themselves")
    if not 0 <= class_k < model.n_classes:
        raise ParameterError(f"class index {class_k} out of range")
    expected = model.layer_output_shape(layer)
    if tuple(activation.shape) != tuple(expected):
        raise ParameterError(
            f"activation shape {tuple(activation.shape)} != layer output {tuple(expected)}"
        )
    # forward through the layers above, caching their inputs
    inputs = []
    x = activation.astype(np.float64)
    for above in model.layers[idx + 1 :]:
        inputs.append(x)
        x = _layer_forward(model, above, x)
    dy = np.zeros(model.n_classes)
    dy[class_k] = 1.0
    for above, cached in zip(reversed(model.layers[idx + 1 :]), reversed(inputs)):
        dy = _layer_backward(model, above, cached, dy)
    return dy


def gradient_at_layer(
    model: ModelGraph, image: np.ndarray, layer: str, class_k: int
) -> np.ndarray:
    _, activation = forward(model, image, layer)
    return gradient_from_activation(model, layer, activation, class_k)


def predict_all(model: ModelGraph, manifest) -> tuple[list[Prediction], list[tuple[str, str]]]:
    """Predict every eval-split instance, in manifest order.

    Unreadable images do not abort the run; they are returned as
    (instance_id, reason) failures so callers can flag them.
    """
    from .data import load_image  # local import: data.py does not import model.py

    predictions: list[Prediction] = []
    failures: list[tuple[str, str]] = []
    capture = model.layers[0].name
    for inst in manifest.instances:
        if inst.split != "eval":
            continue
        try:
            image = load_image(inst.resolved_path, manifest.image_shape)
        except Exception as exc:  # per-instance error, pipeline continues
            failures.append((inst.instance_id, str(exc)))
            continue
        pred, _ = forward(model, image, capture, instance_id=inst.instance_id)
        predictions.append(pred)
    return predictions, failures


# -- container format ---------------------------------------------------


def _layer_to_json(layer: LayerSpec) -> dict:
    entry: dict = {"name": layer.name, "kind": layer.kind}
    if layer.kind == "convolution":
        entry["stride"] = layer.stride
        entry["padding"] = layer.padding
        entry["weight"] = f"{layer.name}.weight"
        entry["bias"] = f"{layer.name}.bias"
    elif layer.kind == "maxpool":
        entry["window"] = layer.window
        entry["stride"] = layer.stride
    elif layer.kind == "dense":
        entry["weight"] = f"{layer.name}.weight"
        entry["bias"] = f"{layer.name}.bias"
    return entry


def save_model(model: ModelGraph, path: str) -> None:
    """Write the container; ``path`` ending in .zip produces the zip form,
    anything else a directory with model.json + tensors.bin."""
    tensor_names: list[str] = []
    tensors: list[np.ndarray] = []
    for layer in model.layers:
        if layer.weight is not None:
            tensor_names.append(f"{layer.name}.weight")
            tensors.append(layer.weight)
            tensor_names.append(f"{layer.name}.bias")
            tensors.append(layer.bias)
    manifest = {
        "format": "concept-probe-model",
        "version": 1,
        "input_shape": list(model.input_shape),
        "normalization": {
            "mean": [float(v) for v in model.norm_mean],
            "std": [float(v) for v in model.norm_std],
        },
        "class_names": list(model.class_names),
        "layers": [_layer_to_json(layer) for layer in model.layers],
        "tensors": tensor_names,
    }
    manifest_bytes = json.dumps(manifest, indent=1).encode("utf-8")
    blob = io.BytesIO()
    write_blob(blob, tensors)
    if path.endswith(".zip"):
        with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
            zf.writestr(MODEL_JSON, manifest_bytes)
            zf.writestr(TENSORS_BIN, blob.getvalue())
    else:
        os.makedirs(path, exist_ok=True)
        with open(os.path.join(path, MODEL_JSON), "wb") as fh:
            fh.write(manifest_bytes)
        with open(os.path.join(path, TENSORS_BIN), "wb") as fh:
            fh.write(blob.getvalue())


def _read_container(path: str) -> tuple[bytes, bytes]:
    if os.path.isdir(path):
        with open(os.path.join(path, MODEL_JSON), "rb") as fh:
            manifest = fh.read()
        with open(os.path.join(path, TENSORS_BIN), "rb") as fh:
            blob = fh.read()
        return manifest, blob
    if zipfile.is_zipfile(path):
        with zipfile.ZipFile(path) as zf:
            return zf.read(MODEL_JSON), zf.read(TENSORS_BIN)
    raise FormatError(f"'{path}' is neither a container directory nor a zip", byte_offset=0)


def load_model(path: str) -> ModelGraph:
    manifest_bytes, blob = _read_container(path)
    try:
        manifest = json.loads(manifest_bytes)
    except json.JSONDecodeError as exc:
        raise FormatError(f"malformed model.json: {exc.msg}", byte_offset=exc.pos) from exc
    for key in ("input_shape", "normalization", "class_names", "layers", "tensors"):
        if key not in manifest:
            raise FormatError(f"model.json missing '{key}'", byte_offset=0)
    if manifest.get("version") != 1:
        raise FormatError(f"unsupported model version {manifest.get('version')!r}", byte_offset=0)

    names = list(manifest["tensors"])
    tensors = read_blob(io.BytesIO(blob), names)

    layers = []
    for entry in manifest["layers"]:
        kind = entry.get("kind")
        if kind not in LAYER_KINDS:
            raise ValidationError(f"unknown layer kind '{kind}'", subject=str(entry.get("name")))
        weight = bias = None
        if kind in ("convolution", "dense"):
            for ref_key in ("weight", "bias"):
                ref = entry.get(ref_key)
                if ref not in tensors:
                    raise ValidationError(
                        f"layer '{entry['name']}' references missing tensor '{ref}'",
                        subject=entry["name"],
                    )
            weight = tensors[entry["weight"]]
            bias = tensors[entry["bias"]]
        layers.append(
            LayerSpec(
                name=entry["name"],
                kind=kind,
                stride=int(entry.get("stride", 1)),
                padding=int(entry.get("padding", 0)),
                window=int(entry.get("window", 0)),
                weight=weight,
                bias=bias,
            )
        )
    norm = manifest["normalization"]
    return ModelGraph(
        layers=layers,
        input_shape=tuple(int(v) for v in manifest["input_shape"]),
        norm_mean=np.asarray(norm["mean"], dtype=np.float64),
        norm_std=np.asarray(norm["std"], dtype=np.float64),
        class_names=[str(c) for c in manifest["class_names"]],
    )
