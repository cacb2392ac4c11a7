"""Multi-seed experiments on the synthetic suite. Run with ``pytest --run-slow``."""

import numpy as np
import pytest

from fishmerge.ensemble import ensemble_trial
from fishmerge.training import TrainConfig
from fishmerge.transfer import suite_ablation

pytestmark = pytest.mark.slow

SEEDS = range(10)


def test_merged_ensemble_keeps_up_with_output_ensemble():
    reports = [ensemble_trial(seed, "blobs-a", n_models=5) for seed in SEEDS]
    fisher = np.mean([r.fisher_merged for r in reports])
    isotropic = np.mean([r.isotropic_merged for r in reports])
    output = np.mean([r.output_ensemble for r in reports])
    assert fisher >= isotropic - 0.005, (fisher, isotropic)
    assert fisher >= output - 0.02, (fisher, output)
    assert all(r.to_dict()["inference_cost_ratio"] == "5:1" for r in reports)


def test_few_fisher_examples_are_enough():
    full = 1000
    reports = [
        suite_ablation(
            seed, "blobs-b", "blobs-a", [256, full], TrainConfig(seed=seed),
            grid_points=50, n_train=full, n_val=2048,
        )
        for seed in SEEDS
    ]
    # scored on the 2048 validation rows that pick lambda
    few = np.mean([r.cell(256, 256)["val_accuracy"] for r in reports])
    everything = np.mean([r.cell(full, full)["val_accuracy"] for r in reports])
    isotropic = np.mean([r.isotropic["val_accuracy"] for r in reports])
    assert abs(few - everything) <= 0.015, (few, everything)
    assert few >= isotropic and everything >= isotropic, (few, everything, isotropic)
