import json
import subprocess
import sys

import numpy as np
import pytest
import torch
import yaml

from crossmodal.cli import main
from crossmodal.config import micro_config
from crossmodal.errors import ConfigurationError, DataError
from crossmodal.nn import ModuleRegistry
from crossmodal.persistence import (
    load_registry,
    read_checkpoint,
    save_registry,
    to_uint8,
    write_checkpoint,
)


def test_checkpoint_bit_exact(micro, tmp_path):
    reg = ModuleRegistry(micro, seed=5)
    save_registry(tmp_path / "a.ckpt", reg, extra={"stage": "x"})
    back, header, _ = load_registry(tmp_path / "a.ckpt", expect_hash=micro.model_hash())
    assert header["stage"] == "x"
    assert back.parameter_digest() == reg.parameter_digest()
    save_registry(tmp_path / "b.ckpt", back, extra={"stage": "x"})
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    with pytest.raises(ConfigurationError):
        load_registry(tmp_path / "a.ckpt", expect_hash="0" * 16)


def test_checkpoint_corruption(tmp_path):
    write_checkpoint(tmp_path / "c.ckpt", {"a": 1}, {"w": np.arange(6, dtype=np.float32).reshape(2, 3)})
    header, blobs = read_checkpoint(tmp_path / "c.ckpt")
    assert header["a"] == 1 and blobs["w"].shape == (2, 3)
    data = (tmp_path / "c.ckpt").read_bytes()
    (tmp_path / "t.ckpt").write_bytes(data[:-5])
    with pytest.raises(DataError):
        read_checkpoint(tmp_path / "t.ckpt")
    (tmp_path / "m.ckpt").write_bytes(b"NOTACKPT" + data[8:])
    with pytest.raises(DataError):
        read_checkpoint(tmp_path / "m.ckpt")


def test_to_uint8():
    np.testing.assert_array_equal(to_uint8(np.array([-1.0, 0.0, 1.0, 3.0])), [0, 128, 255, 255])


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = micro_config(batch_size=2).to_dict()
    (root / "micro.yaml").write_text(yaml.safe_dump(cfg))
    conf = ["--config", str(root / "micro.yaml")]
    assert main(["gen-data", *conf, "--scenes", "3", "--views", "6", "--seed", "2", "--out", str(root / "data")]) == 0
    assert main(["pretrain", *conf, "--data", str(root / "data"), "--steps", "3", "--out", str(root / "pre")]) == 0
    assert main(["train", *conf, "--data", str(root / "data"), "--checkpoint", str(root / "pre" / "pretrain.ckpt"),
                 "--steps", "3", "--out", str(root / "joint")]) == 0
    return root, conf


def test_cli_outputs(workspace):
    root, _ = workspace
    assert (root / "data" / "meta.json").exists()
    assert len((root / "pre" / "pretrain_loss.csv").read_text().splitlines()) == 4
    header, _ = read_checkpoint(root / "joint" / "model.ckpt")
    assert header["stage"] == "joint" and header["trainer"]["step"] == 3
    assert header["modalities"] == ["EO", "LIDAR_P", "LIDAR_RA", "SAR"]


def test_cli_render(workspace, tmp_path):
    root, conf = workspace
    args = ["render", *conf, "--checkpoint", str(root / "joint" / "model.ckpt"), "--data", str(root / "data"),
            "--scene", "scene_0000", "--source-views", "0", "1", "--sources", "EO", "SAR",
            "--target-view", "2", "--target-modality", "LIDAR_P"]
    assert main([*args, "--out", str(tmp_path / "a")]) == 0
    for stem in ("sample", "features", "ground_truth"):
        assert (tmp_path / "a" / f"{stem}.png").exists()
        assert (tmp_path / "a" / f"{stem}.bin").exists()
    sample = np.frombuffer((tmp_path / "a" / "sample.bin").read_bytes(), dtype="<f4")
    assert sample.size == 8 * 8 * 3 and np.all(np.isfinite(sample))
    assert main([*args, "--out", str(tmp_path / "b")]) == 0
    assert (tmp_path / "a" / "sample.bin").read_bytes() == (tmp_path / "b" / "sample.bin").read_bytes()


def test_cli_eval_matrix(workspace, tmp_path):
    root, conf = workspace
    args = ["eval", *conf, "--checkpoint", str(root / "joint" / "model.ckpt"), "--data", str(root / "data"),
            "--experiment", "matrix", "--tasks", "1"]
    assert main([*args, "--out", str(tmp_path / "a")]) == 0
    assert main([*args, "--out", str(tmp_path / "b")]) == 0
    rows = (tmp_path / "a" / "matrix.csv").read_text().splitlines()
    assert len(rows) == 17
    assert (tmp_path / "a" / "matrix.csv").read_bytes() == (tmp_path / "b" / "matrix.csv").read_bytes()
    summary = json.loads((tmp_path / "a" / "matrix.json").read_text())
    assert len(summary["rows"]) == 16


def test_cli_train_resume(workspace, tmp_path):
    root, conf = workspace
    assert main(["train", *conf, "--data", str(root / "data"), "--checkpoint", str(root / "joint" / "model.ckpt"),
                 "--steps", "2", "--out", str(tmp_path)]) == 0
    header, _ = read_checkpoint(tmp_path / "model.ckpt")
    assert header["trainer"]["step"] == 5


def test_cli_exit_codes(workspace, tmp_path, capsys):
    root, conf = workspace
    with pytest.raises(SystemExit) as info:
        main(["gen-data", "--scenes", "many"])
    assert info.value.code == 1
    assert main(["gen-data", "--scenes", "0", "--out", str(tmp_path / "x")]) == 1
    assert main(["eval", *conf, "--checkpoint", str(root / "joint" / "model.ckpt"), "--data",
                 str(tmp_path / "missing"), "--experiment", "matrix"]) == 2
    assert main(["render", *conf, "--checkpoint", str(root / "joint" / "model.ckpt"), "--data", str(root / "data"),
                 "--scene", "scene_0000", "--source-views", "0", "--sources", "EO", "SAR",
                 "--target-view", "2", "--target-modality", "EO"]) == 1
    assert "error" in capsys.readouterr().err


def test_cli_data_hash_mismatch(workspace, tmp_path, capsys):
    root, conf = workspace
    other = micro_config(focal=7.0).to_dict()
    (tmp_path / "other.yaml").write_text(yaml.safe_dump(other))
    assert main(["gen-data", "--config", str(tmp_path / "other.yaml"), "--scenes", "1", "--views", "3",
                 "--out", str(tmp_path / "d")]) == 0
    code = main(["eval", *conf, "--checkpoint", str(root / "joint" / "model.ckpt"), "--data", str(tmp_path / "d"),
                 "--experiment", "matrix"])
    assert code == 2
    assert "hash mismatch" in capsys.readouterr().err


def test_console_entry_point(tmp_path):
    out = subprocess.run([sys.executable, "-m", "crossmodal.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "gen-data" in out.stdout
