"""
Deterministic minibatch training and the synthetic task suite.

Training minimizes mean negative log-likelihood with SGD or Adam; the same
(init, data, config) always gives bit-identical parameters. Fine-tuning is
training from an earlier checkpoint, with a fresh head when the task has a
different number of classes.
"""

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Sequence, Tuple, Union

import numpy as np

from .checkpoint import ParameterSet, save_checkpoint
from .errors import ConfigError, DataFormatError, NumericalError
from .models import (
    LabeledDataset,
    ModelSpec,
    check_params,
    init_params,
    nll_and_grad,
    reinit_head,
    save_dataset_csv,
)

logger = logging.getLogger(__name__)

OPTIMIZERS = ("sgd", "adam")

PathLike = Union[str, Path]


@dataclass(frozen=True)
class TrainConfig:
    optimizer: str = "adam"
    learning_rate: float = 1e-2
    batch_size: int = 32
    epochs: int = 50
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self) -> None:
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"unknown optimizer {self.optimizer!r}, expected one of {OPTIMIZERS}")
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if int(self.batch_size) < 1:
            raise ConfigError(f"batch_size must be positive, got {self.batch_size}")
        if int(self.epochs) < 0:
            raise ConfigError(f"epochs must be nonnegative, got {self.epochs}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("adam betas must lie in [0, 1)")
        if not self.adam_eps > 0:
            raise ConfigError(f"adam_eps must be positive, got {self.adam_eps}")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any]) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {', '.join(sorted(unknown))}")
        try:
            return cls(**raw)
        except TypeError as exc:
            raise ConfigError(f"invalid train config: {exc}") from exc


def load_train_config(path: PathLike) -> TrainConfig:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read train config {path}: {exc}") from exc
    return TrainConfig.from_dict(raw)


@dataclass(frozen=True, eq=False)
class TrainResult:
    params: ParameterSet
    step_losses: List[float]
    epoch_losses: List[float]


def _check_data(spec: ModelSpec, data: LabeledDataset) -> None:
    if len(data) == 0:
        raise DataFormatError("cannot train on an empty dataset")
    if data.input_dim != spec.input_dim:
        raise DataFormatError(
            f"input dim mismatch: data has {data.input_dim}, model expects {spec.input_dim}"
        )
    data.check_classes(spec.num_classes)


def fit(
    spec: ModelSpec, init: ParameterSet, data: LabeledDataset, config: TrainConfig
) -> TrainResult:
    """Train and keep the loss trajectory."""
    check_params(spec, init)
    _check_data(spec, data)
    if config.epochs == 0:
        return TrainResult(init, [], [])

    rng = np.random.default_rng(config.seed)
    theta = {name: np.array(t) for name, t in init.entries.items()}
    m = {name: np.zeros_like(t) for name, t in theta.items()}
    v = {name: np.zeros_like(t) for name, t in theta.items()}
    step = 0
    step_losses: List[float] = []
    epoch_losses: List[float] = []
    n = len(data)

    for epoch in range(config.epochs):
        order = rng.permutation(n)
        running = 0.0
        for start in range(0, n, config.batch_size):
            batch = order[start : start + config.batch_size]
            current = ParameterSet(theta, init.lineage_id, init.roles)
            loss, grads = nll_and_grad(spec, current, data.features[batch], data.labels[batch])
            if not np.isfinite(loss):
                raise NumericalError(f"training diverged: non-finite loss at epoch {epoch}")
            step += 1
            for name, g in grads.items():
                if config.optimizer == "sgd":
                    theta[name] = theta[name] - config.learning_rate * g
                    continue
                m[name] = config.beta1 * m[name] + (1 - config.beta1) * g
                v[name] = config.beta2 * v[name] + (1 - config.beta2) * g * g
                m_hat = m[name] / (1 - config.beta1**step)
                v_hat = v[name] / (1 - config.beta2**step)
                theta[name] = theta[name] - config.learning_rate * m_hat / (
                    np.sqrt(v_hat) + config.adam_eps
                )
            step_losses.append(loss)
            running += loss * len(batch)
        epoch_losses.append(running / n)
        logger.debug("epoch %d: mean loss %.6f", epoch, epoch_losses[-1])

    for name, t in theta.items():
        if not np.all(np.isfinite(t)):
            raise NumericalError(f"training diverged: non-finite values in {name!r}")
    logger.info(
        "trained %d epochs (%d steps), final epoch loss %.6f", config.epochs, step, epoch_losses[-1]
    )
    return TrainResult(ParameterSet(theta, init.lineage_id, init.roles), step_losses, epoch_losses)


def train(
    spec: ModelSpec, init: ParameterSet, data: LabeledDataset, config: TrainConfig
) -> ParameterSet:
    return fit(spec, init, data, config).params


def prepare_finetune(spec: ModelSpec, checkpoint: ParameterSet, seed: int) -> ParameterSet:
    """Checkpoint ready to fine-tune under ``spec``; a head of the wrong size is redrawn."""
    w_name, b_name = spec.head_tensor_names()
    shapes = spec.param_shapes()
    if (
        w_name in checkpoint
        and b_name in checkpoint
        and checkpoint[w_name].shape == shapes[w_name]
        and checkpoint[b_name].shape == shapes[b_name]
    ):
        return checkpoint
    logger.info("reinitializing head %r for %d classes", spec.head_name, spec.num_classes)
    return reinit_head(spec, checkpoint, seed)


def finetune(
    spec: ModelSpec, checkpoint: ParameterSet, data: LabeledDataset, config: TrainConfig
) -> ParameterSet:
    return train(spec, prepare_finetune(spec, checkpoint, config.seed), data, config)


@dataclass(frozen=True, eq=False)
class Task:
    name: str
    family: str
    spec: ModelSpec
    train: LabeledDataset
    val: LabeledDataset
    test: LabeledDataset


@dataclass(frozen=True, eq=False)
class TaskSuite:
    seed: int
    spec: ModelSpec
    init: ParameterSet
    tasks: List[Task] = field(default_factory=list)

    def task(self, name: str) -> Task:
        for t in self.tasks:
            if t.name == name:
                return t
        raise ConfigError(f"no task named {name!r}; have {', '.join(t.name for t in self.tasks)}")


SUITE_HIDDEN = ((16, "tanh"), (16, "tanh"))
# (name, family, rotation in degrees, shift)
SUITE_TASKS: Tuple[Tuple[str, str, float, Tuple[float, float]], ...] = (
    ("blobs-a", "blobs", 0.0, (0.0, 0.0)),
    ("blobs-b", "blobs", 20.0, (0.0, 0.0)),
    ("blobs-c", "blobs", 40.0, (0.0, 0.0)),
    ("blobs-d", "blobs", 10.0, (0.6, -0.4)),
    ("moons-a", "moons", 0.0, (0.0, 0.0)),
    ("moons-b", "moons", 45.0, (0.0, 0.0)),
)
FAMILY_CLASSES = {"blobs": 4, "moons": 2}


def _rotation(degrees: float) -> np.ndarray:
    a = np.deg2rad(degrees)
    return np.array([[np.cos(a), -np.sin(a)], [np.sin(a), np.cos(a)]])


def _blobs(rng: np.random.Generator, n: int) -> Tuple[np.ndarray, np.ndarray]:
    angles = np.deg2rad(np.arange(4) * 90.0)
    centers = 2.0 * np.column_stack([np.cos(angles), np.sin(angles)])
    labels = rng.integers(0, 4, size=n)
    return centers[labels] + 0.9 * rng.normal(size=(n, 2)), labels


def _moons(rng: np.random.Generator, n: int) -> Tuple[np.ndarray, np.ndarray]:
    labels = rng.integers(0, 2, size=n)
    t = rng.uniform(0.0, np.pi, size=n)
    outer = np.column_stack([np.cos(t), np.sin(t)])
    inner = np.column_stack([1.0 - np.cos(t), 0.5 - np.sin(t)])
    X = np.where(labels[:, None] == 0, outer, inner) - np.array([0.5, 0.25])
    return X + 0.2 * rng.normal(size=(n, 2)), labels


def make_task_suite(
    seed: int, n_train: int = 1000, n_val: int = 500, n_test: int = 500
) -> TaskSuite:
    """Shared initialization plus rotated/shifted blob and two-moons tasks.

    Splits are disjoint slices of one draw per task. All tasks share the
    input dimension; class counts are fixed per family.
    """
    spec = ModelSpec(2, SUITE_HIDDEN, FAMILY_CLASSES["blobs"])
    init = init_params(spec, seed)
    total = n_train + n_val + n_test
    tasks = []
    for k, (name, family, degrees, shift) in enumerate(SUITE_TASKS):
        rng = np.random.default_rng([int(seed), k])
        X, y = (_blobs if family == "blobs" else _moons)(rng, total)
        X = X @ _rotation(degrees).T + np.asarray(shift)
        splits = {}
        bounds = {"train": (0, n_train), "val": (n_train, n_train + n_val), "test": (n_train + n_val, total)}
        for split, (lo, hi) in bounds.items():
            splits[split] = LabeledDataset(X[lo:hi], y[lo:hi], f"suite:{seed}/{name}/{split}")
        tasks.append(
            Task(
                name,
                family,
                spec.with_num_classes(FAMILY_CLASSES[family]),
                splits["train"],
                splits["val"],
                splits["test"],
            )
        )
    logger.info("built task suite %d with %d tasks", seed, len(tasks))
    return TaskSuite(seed, spec, init, tasks)


def _write_json(path: Path, obj: Any) -> None:
    try:
        path.write_text(json.dumps(obj, indent=2), encoding="utf8")
    except OSError as exc:
        raise DataFormatError(f"cannot write {path}: {exc}") from exc


def _make_dir(path: Path) -> None:
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataFormatError(f"cannot create directory {path}: {exc}") from exc


def save_task_suite(suite: TaskSuite, out_dir: PathLike) -> Dict[str, Any]:
    """Write spec, shared init and per-task CSV splits; returns the manifest."""
    out = Path(out_dir)
    _make_dir(out)
    _write_json(out / "spec.json", suite.spec.to_dict())
    save_checkpoint(suite.init, None, out / "init.fmrg")
    manifest: Dict[str, Any] = {"seed": suite.seed, "spec": "spec.json", "init": "init.fmrg", "tasks": []}
    for task in suite.tasks:
        task_dir = out / task.name
        _make_dir(task_dir)
        _write_json(task_dir / "spec.json", task.spec.to_dict())
        files = {}
        for split in ("train", "val", "test"):
            path = task_dir / f"{split}.csv"
            save_dataset_csv(getattr(task, split), path)
            files[split] = f"{task.name}/{split}.csv"
        manifest["tasks"].append(
            {"name": task.name, "family": task.family, "num_classes": task.spec.num_classes, **files}
        )
    _write_json(out / "manifest.json", manifest)
    return manifest


def train_seed_variants(
    spec: ModelSpec,
    init: ParameterSet,
    data: LabeledDataset,
    config: TrainConfig,
    seeds: Sequence[int],
) -> List[ParameterSet]:
    """One model per data-order seed, all from the same initialization."""
    models = []
    for s in seeds:
        cfg = TrainConfig(**{**config.to_dict(), "seed": int(s)})
        models.append(finetune(spec, init, data, cfg))
    return models
