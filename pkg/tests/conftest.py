import shutil
import subprocess
import sys
import tempfile
from pathlib import Path

import numpy as np
import pytest

from fishmerge.fisher import FisherConfig, estimate_fisher
from fishmerge.models import LabeledDataset, ModelSpec, init_params
from fishmerge.training import TrainConfig, finetune, make_task_suite

from .test_result_utils import get_results_dir, save_test_result_with_metadata

PROJECT_ROOT = Path(__file__).parent.parent


def pytest_addoption(parser):
    parser.addoption(
        "--update-golden",
        action="store_true",
        default=False,
        help="Update golden files with current output",
    )
    parser.addoption(
        "--clear-results",
        action="store_true",
        default=False,
        help="Clear test results directory at start of test session",
    )
    parser.addoption(
        "--run-slow",
        action="store_true",
        default=False,
        help="Run the multi-seed acceptance experiments",
    )


def pytest_collection_modifyitems(config, items):
    if config.getoption("--run-slow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --run-slow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture(scope="session", autouse=True)
def clear_results_directory(request):
    if request.config.getoption("--clear-results"):
        results_dir = get_results_dir()
        if results_dir.exists():
            shutil.rmtree(results_dir)
            print(f"Cleared results directory: {results_dir}")


@pytest.fixture
def temp_dir():
    with tempfile.TemporaryDirectory() as tmp_dir:
        yield Path(tmp_dir)


def gaussian_classes(spec: ModelSpec, n: int, seed: int, spread: float = 1.5) -> LabeledDataset:
    """One Gaussian cluster per class around random centers."""
    rng = np.random.default_rng(seed)
    centers = spread * rng.normal(size=(spec.num_classes, spec.input_dim))
    labels = rng.integers(0, spec.num_classes, size=n)
    features = centers[labels] + rng.normal(size=(n, spec.input_dim))
    return LabeledDataset(features, labels, f"gaussian:{seed}")


@pytest.fixture
def small_spec():
    return ModelSpec(input_dim=3, hidden_layers=((5, "tanh"),), num_classes=3)


@pytest.fixture
def small_data(small_spec):
    return gaussian_classes(small_spec, 120, seed=7)


@pytest.fixture
def small_params(small_spec):
    return init_params(small_spec, seed=3)


@pytest.fixture(scope="session")
def quick_config():
    return TrainConfig(optimizer="adam", learning_rate=1e-2, batch_size=32, epochs=15, seed=0)


@pytest.fixture(scope="session")
def small_suite():
    return make_task_suite(0, n_train=300, n_val=200, n_test=200)


@pytest.fixture(scope="session")
def blob_pair(small_suite, quick_config):
    """Two blob tasks fine-tuned from the suite init, with exact Fishers."""
    a, b = small_suite.task("blobs-a"), small_suite.task("blobs-b")
    ma = finetune(a.spec, small_suite.init, a.train, quick_config)
    mb = finetune(b.spec, small_suite.init, b.train, quick_config)
    cfg = FisherConfig(n_examples=256, mode="exact", seed=0)
    return {
        "spec": a.spec,
        "tasks": (a, b),
        "models": (ma, mb),
        "fishers": (estimate_fisher(a.spec, ma, a.train, cfg), estimate_fisher(b.spec, mb, b.train, cfg)),
    }


@pytest.fixture
def run_cli(request):
    """Run ``python -m fishmerge`` from the project root and keep its output under results/."""

    def run(*args: str):
        cmd = [sys.executable, "-m", "fishmerge", *map(str, args)]
        result = subprocess.run(cmd, cwd=PROJECT_ROOT, capture_output=True, text=True)
        save_test_result_with_metadata(
            request.node.name,
            result.stdout,
            {"command": " ".join(cmd[1:]), "returncode": result.returncode, "stderr": result.stderr.strip()},
        )
        return result

    return run
