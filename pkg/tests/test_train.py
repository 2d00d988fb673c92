import json

import numpy as np
import pytest

from dge.config import validate
from dge.encoder import VitClassifier
from dge.errors import NumericError, TrainingAborted
from dge.harness import bench, evaluate, load_model
from dge.schemas import MetricsRecord
from dge.worker import train_worker
from dge.worker.train_worker import no_decay_names, train


def tiny_config(out_dir, **model):
    return validate({
        "seed": 1,
        "out_dir": str(out_dir),
        "model": {"image_size": 8, "patch_size": 2, "channels": 8, "heads": 2, "mlp_ratio": 1.0, "depth": 1,
                  "num_classes": 4, **model},
        "dataset": {"image_size": 8, "num_classes": 4, "window": 4, "train_size": 12, "val_size": 6},
        "train": {"epochs": 2, "batch_size": 4, "max_steps": 5},
    })


def test_short_run_writes_artifacts(tmp_path):
    ticks = []
    result = train(tiny_config(tmp_path / "run"), lambda state, progress, msg: ticks.append(progress))
    assert result.steps == 5
    for path in (result.best, result.final, result.metrics, result.report):
        assert path.exists()
    assert result.best.with_suffix(".bin").exists()
    lines = result.metrics.read_text().splitlines()
    records = [MetricsRecord.model_validate_json(line) for line in lines]
    assert [r.step for r in records] == [1, 2, 3, 4, 5]
    assert [r.epoch for r in records] == [0, 0, 0, 1, 1]
    assert all(0.0 < r.beta <= 1.0 and len(r.psi) == 1 and r.wall_clock is None for r in records)
    assert ticks == sorted(ticks) and ticks[-1] == 95
    report = json.loads(result.report.read_text())
    assert report["steps"] == 5 and 0.0 <= report["final"]["accuracy"] <= 1.0


def test_runs_are_byte_identical(tmp_path):
    a = train(tiny_config(tmp_path / "a"))
    b = train(tiny_config(tmp_path / "b"))
    for name in ("final.bin", "final.json", "best.bin", "metrics.jsonl", "report.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name
    assert a.final_accuracy == b.final_accuracy


def test_checkpoint_reloads_for_evaluation(tmp_path):
    config = tiny_config(tmp_path / "run")
    result = train(config)
    model, restored = load_model(result.final)
    assert restored.model == config.model
    from dge.dataset import make_dataset
    _, val = make_dataset(config.dataset)
    assert evaluate(result.final, val).accuracy == result.final_accuracy
    table = bench(model, val.subset(2), repetitions=1)
    assert list(table["mode"]) == ["dense", "routed"]
    assert table.loc[0, "flops_ratio"] == 1.0 and table.loc[0, "total_flops_ratio"] == 1.0
    assert 0.0 < table.loc[1, "flops_ratio"] <= 1.0
    assert table.loc[1, "flops_ratio"] == evaluate(result.final, val.subset(2)).beta


def test_dense_config_trains(tmp_path):
    result = train(tiny_config(tmp_path / "dense", dense=True))
    records = [json.loads(line) for line in result.metrics.read_text().splitlines()]
    assert all(r["beta"] == 1.0 and r["budget_loss"] == pytest.approx(0.25) for r in records)


def test_no_decay_covers_vectors_and_embeddings(tmp_path):
    model = VitClassifier(tiny_config(tmp_path).model)
    names = set(no_decay_names(model))
    assert {"pos_embed", "cls_token", "head.bias", "norm.gain"} <= names
    assert "head.weight" not in names and "blocks.0.gate_weight" not in names


class DivergedClassifier(VitClassifier):
    def __init__(self, cfg, seed=0):
        super().__init__(cfg, seed=seed)
        # overflows to inf at f32, so the logits are non-finite
        self.head.weight.data = self.head.weight.data * np.float32(1e30) * np.float32(1e30)


def test_diverged_model_aborts_with_last_good(tmp_path, monkeypatch):
    monkeypatch.setattr(train_worker, "VitClassifier", DivergedClassifier)
    with pytest.raises(TrainingAborted) as err:
        train(tiny_config(tmp_path / "bad"))
    assert isinstance(err.value.__cause__, NumericError)
    assert "step 0" in str(err.value)
    assert err.value.last_good.endswith("last_good.json")
    assert (tmp_path / "bad" / "last_good.bin").exists()
    assert not (tmp_path / "bad" / "final.json").exists()
    assert (tmp_path / "bad" / "metrics.jsonl").read_text() == ""


def test_identity_granularity_trains_like_dense(tmp_path):
    routed = train(tiny_config(tmp_path / "routed", phi=[1], region_size=1))
    dense = train(tiny_config(tmp_path / "dense", phi=[1], region_size=1, dense=True))

    def task_losses(result):
        return [json.loads(line)["task_loss"] for line in result.metrics.read_text().splitlines()]

    assert len(task_losses(routed)) == 5
    assert task_losses(routed) == task_losses(dense)
    assert routed.final_accuracy == dense.final_accuracy


@pytest.mark.slow
@pytest.mark.parametrize("gamma", [0.25, 0.5, 0.75])
def test_budget_is_met_after_training(tmp_path, gamma):
    config = validate({
        "seed": 0, "out_dir": str(tmp_path),
        "model": {"image_size": 16, "patch_size": 2, "channels": 16, "heads": 2, "mlp_ratio": 2.0, "depth": 2,
                  "num_classes": 4, "gamma": gamma},
        "dataset": {"image_size": 16, "num_classes": 4, "window": 6, "train_size": 256, "val_size": 64},
        "optim": {"lr": 3e-3},
        "train": {"epochs": 6, "batch_size": 16},
    })
    result = train(config)
    beta = json.loads(result.report.read_text())["final"]["beta"]
    assert abs(beta - gamma) <= 0.1
