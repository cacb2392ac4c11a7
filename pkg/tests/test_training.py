import json

import numpy as np
import pytest

from fishmerge.checkpoint import load_checkpoint
from fishmerge.errors import ConfigError, DataFormatError, NumericalError
from fishmerge.models import LabeledDataset, ModelSpec, evaluate, init_params
from fishmerge.training import (
    TrainConfig,
    finetune,
    fit,
    load_train_config,
    make_task_suite,
    prepare_finetune,
    save_task_suite,
    train,
    train_seed_variants,
)


def test_training_is_deterministic(small_spec, small_params, small_data, quick_config):
    a = train(small_spec, small_params, small_data, quick_config)
    b = train(small_spec, small_params, small_data, quick_config)
    for name in a.names():
        assert a[name].tobytes() == b[name].tobytes()
    assert a.lineage_id == small_params.lineage_id


@pytest.mark.parametrize("optimizer, lr", [("adam", 1e-2), ("sgd", 0.5)])
def test_loss_decreases(small_spec, small_params, small_data, optimizer, lr):
    result = fit(small_spec, small_params, small_data, TrainConfig(optimizer=optimizer, learning_rate=lr, epochs=20))
    assert len(result.epoch_losses) == 20
    assert result.epoch_losses[-1] < result.epoch_losses[0]
    assert len(result.step_losses) == 20 * 4


def test_zero_epochs_returns_init(small_spec, small_params, small_data):
    assert train(small_spec, small_params, small_data, TrainConfig(epochs=0)) is small_params


def test_divergence_is_a_numerical_error(small_spec, small_params, small_data):
    with np.errstate(all="ignore"), pytest.raises(NumericalError, match="diverged"):
        train(small_spec, small_params, small_data, TrainConfig(learning_rate=1e308, epochs=3))


def test_data_checks(small_spec, small_params):
    wrong_dim = LabeledDataset(np.zeros((4, 2)), np.zeros(4, dtype=int))
    with pytest.raises(DataFormatError, match="input dim"):
        train(small_spec, small_params, wrong_dim, TrainConfig(epochs=1))
    empty = LabeledDataset(np.zeros((0, 3)), np.zeros(0, dtype=int))
    with pytest.raises(DataFormatError, match="empty"):
        train(small_spec, small_params, empty, TrainConfig(epochs=1))
    bad_label = LabeledDataset(np.zeros((2, 3)), np.array([0, 7]))
    with pytest.raises(DataFormatError):
        train(small_spec, small_params, bad_label, TrainConfig(epochs=1))


@pytest.mark.parametrize(
    "kwargs",
    [
        {"optimizer": "lbfgs"},
        {"learning_rate": 0.0},
        {"batch_size": 0},
        {"epochs": -1},
        {"beta1": 1.0},
        {"adam_eps": 0.0},
    ],
)
def test_invalid_train_config(kwargs):
    with pytest.raises(ConfigError):
        TrainConfig(**kwargs)


def test_train_config_from_file(temp_dir):
    path = temp_dir / "train.json"
    path.write_text(json.dumps({"optimizer": "sgd", "epochs": 3}), encoding="utf8")
    cfg = load_train_config(path)
    assert cfg.optimizer == "sgd" and cfg.epochs == 3 and cfg.batch_size == 32

    path.write_text(json.dumps({"epochs": 3, "momentum": 0.9}), encoding="utf8")
    with pytest.raises(ConfigError, match="momentum"):
        load_train_config(path)
    path.write_text("{not json", encoding="utf8")
    with pytest.raises(ConfigError, match="cannot read"):
        load_train_config(path)


def test_task_suite_structure(small_suite):
    names = [t.name for t in small_suite.tasks]
    assert names == ["blobs-a", "blobs-b", "blobs-c", "blobs-d", "moons-a", "moons-b"]
    for task in small_suite.tasks:
        assert task.spec.input_dim == 2
        assert task.spec.num_classes == (4 if task.family == "blobs" else 2)
        assert (len(task.train), len(task.val), len(task.test)) == (300, 200, 200)
        task.train.check_classes(task.spec.num_classes)
    with pytest.raises(ConfigError, match="no task named"):
        small_suite.task("spirals")


def test_task_suite_is_seeded(small_suite):
    again = make_task_suite(0, n_train=300, n_val=200, n_test=200)
    assert again.task("moons-b").train.features.tobytes() == small_suite.task("moons-b").train.features.tobytes()
    other = make_task_suite(1, n_train=300, n_val=200, n_test=200)
    assert other.init.lineage_id != small_suite.init.lineage_id


def test_save_task_suite(small_suite, temp_dir):
    manifest = save_task_suite(small_suite, temp_dir)
    assert [t["name"] for t in manifest["tasks"]] == [t.name for t in small_suite.tasks]
    assert json.loads((temp_dir / "manifest.json").read_text(encoding="utf8")) == manifest
    init, _ = load_checkpoint(temp_dir / manifest["init"])
    for name in init.names():
        assert init[name].tobytes() == small_suite.init[name].tobytes()
    for entry in manifest["tasks"]:
        for split in ("train", "val", "test"):
            assert (temp_dir / entry[split]).exists()


def test_finetune_redraws_a_mismatched_head(small_suite):
    moons = small_suite.task("moons-a")
    prepared = prepare_finetune(moons.spec, small_suite.init, seed=0)
    assert prepared["head.weight"].shape == (2, 16)
    assert prepared.lineage_id == small_suite.init.lineage_id
    assert prepared["layer0.weight"].tobytes() == small_suite.init["layer0.weight"].tobytes()

    blobs = small_suite.task("blobs-a")
    assert prepare_finetune(blobs.spec, small_suite.init, seed=0) is small_suite.init


def test_finetune_learns_the_task(blob_pair):
    (task, _), (model, _) = blob_pair["tasks"], blob_pair["models"]
    assert evaluate(blob_pair["spec"], model, task.test) > 0.7


def test_seed_variants_share_lineage(small_suite):
    task = small_suite.task("blobs-a")
    cfg = TrainConfig(epochs=2)
    models = train_seed_variants(task.spec, small_suite.init, task.train, cfg, seeds=[0, 1])
    assert len(models) == 2
    assert models[0].lineage_id == models[1].lineage_id == small_suite.init.lineage_id
    assert models[0]["head.bias"].tobytes() != models[1]["head.bias"].tobytes()
    same = finetune(task.spec, small_suite.init, task.train, cfg)
    assert same["head.bias"].tobytes() == models[0]["head.bias"].tobytes()


def test_separable_blobs_are_fit_exactly():
    spec = ModelSpec(input_dim=2, hidden_layers=((8, "tanh"),), num_classes=2)
    rng = np.random.default_rng(5)
    labels = rng.integers(0, 2, size=200)
    centers = np.array([[-3.0, -3.0], [3.0, 3.0]])
    data = LabeledDataset(centers[labels] + 0.5 * rng.normal(size=(200, 2)), labels)
    model = train(spec, init_params(spec, seed=0), data, TrainConfig(optimizer="adam", learning_rate=1e-2, epochs=50))
    assert evaluate(spec, model, data) >= 0.99


def test_splits_are_disjoint(small_suite):
    task = small_suite.task("blobs-c")
    rows = {split: {tuple(r) for r in getattr(task, split).features} for split in ("train", "val", "test")}
    assert not rows["train"] & rows["val"]
    assert not rows["train"] & rows["test"]
    assert not rows["val"] & rows["test"]


def test_rotated_task_beats_chance(blob_pair):
    (_, rotated), (model, _) = blob_pair["tasks"], blob_pair["models"]
    assert evaluate(blob_pair["spec"], model, rotated.test) > 1.0 / rotated.spec.num_classes + 0.1


def test_save_task_suite_into_a_file_is_a_data_error(small_suite, temp_dir):
    blocker = temp_dir / "taken"
    blocker.write_text("", encoding="utf8")
    with pytest.raises(DataFormatError, match="cannot create directory"):
        save_task_suite(small_suite, blocker / "suite")
