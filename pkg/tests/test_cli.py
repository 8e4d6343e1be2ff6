import json

import numpy as np
import pytest
from PIL import Image

from raysparse import cli
from raysparse.io import load_index

TINY = {
    "backbone": {"n_blocks": 1, "d_model": 32, "ffn_width": 32, "encoder_widths": [8, 16, 16, 32]},
    "heads": {"n_queries": 6, "decoder_ffn": 32, "shape_size": 7, "shape_channels": 4,
              "seg_widths": [8, 8, 4, 4], "nvs": True},
    "scenes": {"n_frames": 6, "shape_size": 7},
    "train": {"phase1_steps": 2, "phase2_steps": 2, "train_frames": 2, "eval_frames": 3,
              "n_train_scenes": 2, "n_eval_scenes": 2, "log_every": 0},
}


def run(tmp_path, name, *argv):
    out = tmp_path / name
    assert cli.main([*argv, "--config", str(tmp_path / "tiny.json"), "--run-dir", str(out)]) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["command"] == argv[0]
    for f in manifest["outputs"]:
        assert (out / f).exists()
    return out, manifest


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli")
    (tmp / "tiny.json").write_text(json.dumps(TINY))
    data, _ = run(tmp, "data", "gen-scenes", "--split", "eval")
    run(tmp, "data", "gen-scenes", "--split", "train")
    trained, manifest = run(tmp, "train", "train", "--data", str(data / "train"), "--eval-data", str(data / "eval"))
    return tmp, data, trained, manifest


def test_generation_and_training_outputs(workspace):
    tmp, data, trained, manifest = workspace
    assert len(list((data / "eval").glob("scene_*"))) == 2
    assert {"checkpoint.rtck", "train_log.jsonl", "eval_report.json"} <= set(manifest["outputs"])
    lines = (trained / "train_log.jsonl").read_text().splitlines()
    assert [json.loads(l)["step"] for l in lines] == [0, 1, 2, 3]


def test_build_index_and_bench(workspace):
    tmp, data, _, _ = workspace
    out, manifest = run(tmp, "index", "build-index", "--scene", str(data / "eval" / "scene_0000"), "--frames", "3")
    index = load_index(out / "index.rtix")
    assert index.n_views == 3 and manifest["result"]["n_pairs"] == len(index)
    out, manifest = run(tmp, "bench", "bench-memory", "--views", "2")
    report = json.loads((out / "memory.json").read_text())
    assert {"entries", "dense_bytes", "sparse_bytes", "ratio", "fwd_ms", "bwd_ms"} <= set(report)
    assert report["fwd_ms"] > 0 and report["dense_bytes"] > report["sparse_bytes"]


def test_eval_mesh_sweep_and_nvs(workspace):
    tmp, data, trained, _ = workspace
    ckpt = str(trained / "checkpoint.rtck")
    out, manifest = run(tmp, "eval", "eval", "--checkpoint", ckpt, "--data", str(data / "eval"), "--frames", "1", "6")
    assert set(manifest["result"]) == {"1", "6"}
    assert (out / "eval_6frames.json").exists()
    out, _ = run(tmp, "mesh", "extract-mesh", "--checkpoint", ckpt, "--scene", str(data / "eval" / "scene_0001"))
    assert (out / "scene.obj").exists() and isinstance(json.loads((out / "predictions.json").read_text()), list)
    out, _ = run(tmp, "sweep", "sweep-thresholds", "--checkpoint", ckpt, "--data", str(data / "eval"), "--points", "4")
    assert len((out / "sweep.csv").read_text().splitlines()) == 5
    out, manifest = run(tmp, "nvs", "render-nvs", "--checkpoint", ckpt, "--scene", str(data / "eval" / "scene_0000"),
                        "--view", "1", "--frames", "2")
    image = np.asarray(Image.open(out / "novel_001.png"))
    assert image.shape == (96, 128, 3) and 0 <= manifest["result"]["mse"] <= 1


def test_render_nvs_needs_the_head(tmp_path, workspace):
    _, data, _, _ = workspace
    cfg = {**TINY, "heads": {**TINY["heads"], "nvs": False}}
    (tmp_path / "tiny.json").write_text(json.dumps(cfg))
    trained, _ = run(tmp_path, "train", "train", "--data", str(data / "train"), "--eval-data", str(data / "eval"),
                     "--steps", "1")
    with pytest.raises(SystemExit):
        run(tmp_path, "nvs", "render-nvs", "--checkpoint", str(trained / "checkpoint.rtck"),
            "--scene", str(data / "eval" / "scene_0000"), "--view", "1")


def test_global_flags_resolve(tmp_path):
    args = cli.build_parser().parse_args(["bench-memory", "--preset", "paper", "--seed", "9"])
    cfg = cli._resolve_config(args)
    assert cfg.backbone.grid_dims == (48, 48, 16) and cfg.train.seed == 9
