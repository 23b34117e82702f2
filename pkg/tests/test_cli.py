import json
import os

from concept_probe.cli import main
from concept_probe.snapshot import load_snapshot


def test_run_inspect_export(tmp_path, fixture_paths, capsys):
    config_path = tmp_path / "config.json"
    config_path.write_text(
        json.dumps(
            {
                "dataset_path": fixture_paths.dataset_json,
                "model_path": fixture_paths.model_dir,
                "layer": "relu1",
                "images_per_class": 6,
                "segment_resolutions": [15],
                "concepts_per_class": 3,
                "n_cavs": 4,
                "pooling": "gap",
            }
        )
    )
    out_root = str(tmp_path / "snaps")
    assert main(["run", "--config", str(config_path), "--seed", "13", "--out", out_root]) == 0
    printed = capsys.readouterr().out.strip().splitlines()[-1]
    assert os.path.isdir(printed)
    snapshot = load_snapshot(printed)
    assert snapshot.manifest["config"]["seed"] == 13

    assert main(["inspect", "--snapshot", printed]) == 0
    text = capsys.readouterr().out
    assert "striped" in text and "concepts" in text

    assert main(["inspect", "--snapshot", printed, "--class", "1"]) == 0
    capsys.readouterr()

    export_path = str(tmp_path / "export.json")
    assert main(["export", "--snapshot", printed, "--format", "json", "--out", export_path]) == 0
    doc = json.loads(open(export_path).read())
    assert doc["snapshot_id"] == snapshot.snapshot_id
    assert doc["tensors"]
    first = next(iter(doc["tensors"].values()))
    assert {"shape", "data"} <= set(first)
