import json

import numpy as np
import pytest

from dge.checkpoint import MAGIC, load_checkpoint, save_checkpoint
from dge.encoder import VitClassifier
from dge.errors import CheckpointError


def test_manifest_layout(tmp_path):
    params = {"a": np.arange(6, dtype=np.float32).reshape(2, 3), "b": np.ones(4, dtype=np.float64)}
    path = save_checkpoint(tmp_path / "ckpt", params, {"depth": 1})
    manifest = json.loads(path.read_text())
    assert manifest["format"] == "DGE1"
    assert manifest["parameters"]["a"] == {"shape": [2, 3], "dtype": "<f4", "offset": 4, "nbytes": 24}
    assert manifest["parameters"]["b"]["offset"] == 28
    blob = (tmp_path / "ckpt.bin").read_bytes()
    assert blob.startswith(MAGIC) and len(blob) == 4 + 24 + 32

    loaded_manifest, loaded = load_checkpoint(tmp_path / "ckpt")
    assert loaded_manifest["architecture"] == {"depth": 1}
    assert np.array_equal(loaded["a"], params["a"]) and loaded["b"].dtype == np.float64


def test_bad_magic(tmp_path):
    save_checkpoint(tmp_path / "c", {"a": np.zeros(2, dtype=np.float32)}, {})
    (tmp_path / "c.bin").write_bytes(b"XXXX" + bytes(8))
    with pytest.raises(CheckpointError, match="not a DGE1"):
        load_checkpoint(tmp_path / "c")


def test_missing_and_truncated(tmp_path):
    with pytest.raises(CheckpointError, match="missing"):
        load_checkpoint(tmp_path / "nope")
    save_checkpoint(tmp_path / "c", {"a": np.zeros(8, dtype=np.float32)}, {})
    (tmp_path / "c.bin").write_bytes(MAGIC + bytes(4))
    with pytest.raises(CheckpointError, match="past the end"):
        load_checkpoint(tmp_path / "c")


def test_model_state_round_trip_and_mismatch(tmp_path, small_cfg):
    model = VitClassifier(small_cfg, seed=1)
    save_checkpoint(tmp_path / "m", model.state_dict(), small_cfg.model_dump(mode="json"))
    _, params = load_checkpoint(tmp_path / "m.json")
    other = VitClassifier(small_cfg, seed=2)
    other.load_state_dict(params)
    for (name, p), (_, q) in zip(model.named_parameters(), other.named_parameters()):
        assert np.array_equal(p.data, q.data), name

    deeper = VitClassifier(small_cfg.model_copy(update={"depth": 3}), seed=1)
    with pytest.raises(CheckpointError, match="missing"):
        deeper.load_state_dict(params)
    params["head.weight"] = params["head.weight"][:, :2]
    with pytest.raises(CheckpointError, match="shape mismatch"):
        other.load_state_dict(params)
