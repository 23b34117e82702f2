import numpy as np
import pytest

from concept_probe.data import load_manifest
from concept_probe.model import LayerSpec, ModelGraph, load_model
from concept_probe.pipeline import PipelineConfig, run_pipeline
from concept_probe.planted import CAPTURE_LAYER, build_planted_fixture, load_oracle


@pytest.fixture(scope="session")
def fixture_paths(tmp_path_factory):
    root = tmp_path_factory.mktemp("fixture")
    return build_planted_fixture(str(root), seed=0)


@pytest.fixture(scope="session")
def fixture_manifest(fixture_paths):
    return load_manifest(fixture_paths.dataset_json)


@pytest.fixture(scope="session")
def fixture_model(fixture_paths):
    return load_model(fixture_paths.model_dir)


@pytest.fixture(scope="session")
def fixture_oracle(fixture_paths):
    return load_oracle(fixture_paths.oracle_json)


@pytest.fixture(scope="session")
def fixture_config(fixture_paths):
    return PipelineConfig(
        dataset_path=fixture_paths.dataset_json,
        model_path=fixture_paths.model_dir,
        layer=CAPTURE_LAYER,
        pooling="gap",
        seed=7,
    )


@pytest.fixture(scope="session")
def snapshot_root(tmp_path_factory):
    return str(tmp_path_factory.mktemp("snapshots"))


@pytest.fixture(scope="session")
def fixture_snapshot(fixture_config, snapshot_root):
    return run_pipeline(fixture_config, snapshot_root)


def tiny_model(seed: int = 0, input_shape=(8, 8, 3), n_classes=3) -> ModelGraph:
    """Small random conv/relu/pool/dense net for gradient and IO tests."""
    rng = np.random.default_rng(seed)
    c_out = 4
    conv_w = rng.normal(0, 0.5, size=(3, 3, input_shape[2], c_out)).astype(np.float32)
    conv_b = rng.normal(0, 0.1, size=c_out).astype(np.float32)
    h = (input_shape[0] + 2 - 3) // 1 + 1
    pooled = (h - 2) // 2 + 1
    fan_in = pooled * pooled * c_out
    dense_w = rng.normal(0, 0.5, size=(fan_in, n_classes)).astype(np.float32)
    dense_b = rng.normal(0, 0.1, size=n_classes).astype(np.float32)
    layers = [
        LayerSpec(name="conv", kind="convolution", stride=1, padding=1, weight=conv_w, bias=conv_b),
        LayerSpec(name="act", kind="relu"),
        LayerSpec(name="pool", kind="maxpool", window=2, stride=2),
        LayerSpec(name="flat", kind="flatten"),
        LayerSpec(name="head", kind="dense", weight=dense_w, bias=dense_b),
    ]
    return ModelGraph(
        layers=layers,
        input_shape=input_shape,
        norm_mean=np.zeros(input_shape[2]),
        norm_std=np.ones(input_shape[2]),
        class_names=[f"c{i}" for i in range(n_classes)],
    )
