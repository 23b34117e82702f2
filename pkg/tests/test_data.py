import json

import numpy as np
import pytest
from PIL import Image

from concept_probe.data import (
    compute_channel_means,
    load_image,
    load_manifest,
    sample_class_images,
)
from concept_probe.errors import EmptyClassError, ValidationError


def write_dataset(tmp_path, entries, class_names=("a", "b", "c"), shape=(32, 32, 3)):
    (tmp_path / "images").mkdir(exist_ok=True)
    rng = np.random.default_rng(0)
    for entry in entries:
        img = (rng.random((shape[0], shape[1], shape[2])) * 255).astype(np.uint8)
        Image.fromarray(img).save(tmp_path / entry["path"])
    doc = {"class_names": list(class_names), "image_shape": list(shape), "instances": entries}
    path = tmp_path / "dataset.json"
    path.write_text(json.dumps(doc))
    return str(path)


class TestManifest:
    def test_fixture_manifest(self, fixture_manifest):
        assert len(fixture_manifest.instances) == 240
        assert fixture_manifest.class_names == ["striped", "spotted", "plain"]
        assert len(fixture_manifest.split_instances("probe")) == 150

    def test_label_out_of_range(self, tmp_path):
        path = write_dataset(
            tmp_path,
            [{"id": "x", "path": "images/x.png", "label": 7, "split": "probe"}],
        )
        with pytest.raises(ValidationError) as err:
            load_manifest(path)
        assert err.value.subject == "x"

    def test_empty_instances_valid(self, tmp_path):
        path = write_dataset(tmp_path, [])
        manifest = load_manifest(path)
        assert manifest.instances == []

    def test_duplicate_id_rejected(self, tmp_path):
        entries = [
            {"id": "x", "path": "images/x.png", "label": 0, "split": "probe"},
            {"id": "x", "path": "images/y.png", "label": 0, "split": "probe"},
        ]
        path = write_dataset(tmp_path, entries)
        with pytest.raises(ValidationError):
            load_manifest(path)

    def test_unknown_split_rejected(self, tmp_path):
        path = write_dataset(
            tmp_path, [{"id": "x", "path": "images/x.png", "label": 0, "split": "train"}]
        )
        with pytest.raises(ValidationError):
            load_manifest(path)


class TestSampling:
    def test_all_returned_when_enough(self, fixture_manifest):
        sample = sample_class_images(fixture_manifest, 0, 50, seed=1)
        assert len(sample) == 50
        assert len({i.instance_id for i in sample}) == 50
        assert all(i.label == 0 and i.split == "probe" for i in sample)

    def test_clamped_when_short(self, fixture_manifest):
        sample = sample_class_images(fixture_manifest, 1, 500, seed=1)
        assert len(sample) == 50  # all available probe instances

    def test_deterministic(self, fixture_manifest):
        a = sample_class_images(fixture_manifest, 2, 20, seed=9)
        b = sample_class_images(fixture_manifest, 2, 20, seed=9)
        assert [i.instance_id for i in a] == [i.instance_id for i in b]
        c = sample_class_images(fixture_manifest, 2, 20, seed=10)
        assert [i.instance_id for i in a] != [i.instance_id for i in c]

    def test_empty_class(self, tmp_path):
        path = write_dataset(
            tmp_path, [{"id": "x", "path": "images/x.png", "label": 0, "split": "eval"}]
        )
        manifest = load_manifest(path)
        with pytest.raises(EmptyClassError):
            sample_class_images(manifest, 0, 5, seed=0)


class TestImages:
    def test_rgb_png(self, tmp_path):
        img = (np.random.default_rng(1).random((32, 32, 3)) * 255).astype(np.uint8)
        Image.fromarray(img).save(tmp_path / "img.png")
        arr = load_image(str(tmp_path / "img.png"), (32, 32, 3))
        assert arr.shape == (32, 32, 3)
        assert arr.dtype == np.float32
        assert arr.min() >= 0.0 and arr.max() <= 1.0

    def test_grayscale_replicated(self, tmp_path):
        img = (np.random.default_rng(2).random((32, 32)) * 255).astype(np.uint8)
        Image.fromarray(img, mode="L").save(tmp_path / "gray.png")
        arr = load_image(str(tmp_path / "gray.png"), (32, 32, 3))
        assert arr.shape == (32, 32, 3)
        np.testing.assert_array_equal(arr[:, :, 0], arr[:, :, 1])
        np.testing.assert_array_equal(arr[:, :, 0], arr[:, :, 2])

    def test_wrong_dimensions(self, tmp_path):
        img = (np.random.default_rng(3).random((16, 16, 3)) * 255).astype(np.uint8)
        Image.fromarray(img).save(tmp_path / "small.png")
        with pytest.raises(ValidationError):
            load_image(str(tmp_path / "small.png"), (32, 32, 3))


class TestChannelMeans:
    def test_stability(self, fixture_manifest):
        import copy

        a = compute_channel_means(fixture_manifest)
        fresh = copy.deepcopy(fixture_manifest)
        fresh._channel_means = None
        b = compute_channel_means(fresh)
        assert np.abs(a - b).max() < 1e-9

    def test_shape_and_range(self, fixture_manifest):
        means = compute_channel_means(fixture_manifest)
        assert means.shape == (3,)
        assert (means > 0).all() and (means < 1).all()
