"""
Diagonal Fisher information of a classifier's parameters.

F[j] = 1/N * sum_i E_{y ~ p(y|x_i)} (d log p(y|x_i) / d theta_j)**2, with the
inner expectation taken exactly over all classes or replaced by the mean of K
samples from the model's own predictive distribution.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Union

import numpy as np

from .checkpoint import ParameterSet, read_tensor_file, write_tensor_file
from .config import FISHER_EXAMPLES, FISHER_SAMPLES, MAX_EXACT_CLASSES, thread_count
from .errors import CheckpointFormatError, ConfigError, DataFormatError, NumericalError
from .models import (
    LabeledDataset,
    ModelSpec,
    check_params,
    forward_batch,
    predict_log_probs,
    weighted_squared_grads,
)

logger = logging.getLogger(__name__)

MODES = ("exact", "sampled")
CHUNK_ROWS = 256

PathLike = Union[str, Path]


@dataclass(frozen=True)
class FisherConfig:
    n_examples: int = FISHER_EXAMPLES
    mode: str = "exact"
    samples: int = FISHER_SAMPLES
    seed: int = 0

    def __post_init__(self) -> None:
        if int(self.n_examples) < 1:
            raise ConfigError(f"n_examples must be at least 1, got {self.n_examples}")
        if self.mode not in MODES:
            raise ConfigError(f"unknown Fisher mode {self.mode!r}, expected one of {MODES}")
        if self.mode == "sampled" and int(self.samples) < 1:
            raise ConfigError(f"samples per example must be at least 1, got {self.samples}")

    def to_dict(self) -> Dict[str, Any]:
        return {
            "n_examples": int(self.n_examples),
            "mode": self.mode,
            "samples": int(self.samples),
            "seed": int(self.seed),
        }


@dataclass(frozen=True, eq=False)
class FisherDiagonal:
    entries: Mapping[str, np.ndarray]
    n_examples_used: int
    mode: str
    lineage_id: str
    samples: int = 0
    seed: int = 0
    roles: Mapping[str, str] = field(default_factory=dict)
    provenance: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        entries = {}
        for name, value in self.entries.items():
            arr = np.array(value, dtype=np.float64, copy=True)
            if not np.all(np.isfinite(arr)):
                raise NumericalError(f"non-finite Fisher entry in {name!r}")
            if np.any(arr < 0):
                raise NumericalError(f"negative Fisher entry in {name!r}")
            arr.setflags(write=False)
            entries[name] = arr
        if int(self.n_examples_used) < 1:
            raise DataFormatError("Fisher must be estimated from at least one example")
        if self.mode not in MODES:
            raise DataFormatError(f"unknown Fisher mode {self.mode!r}")
        object.__setattr__(self, "entries", entries)
        object.__setattr__(self, "roles", {n: self.roles.get(n, "body") for n in entries})
        object.__setattr__(self, "provenance", dict(self.provenance))

    def __getitem__(self, name: str) -> np.ndarray:
        return self.entries[name]

    def names(self) -> List[str]:
        return list(self.entries)

    def shapes(self) -> Dict[str, tuple]:
        return {n: tuple(t.shape) for n, t in self.entries.items()}

    def scaled(self, factor: float) -> "FisherDiagonal":
        return FisherDiagonal(
            {n: t * factor for n, t in self.entries.items()},
            self.n_examples_used,
            self.mode,
            self.lineage_id,
            self.samples,
            self.seed,
            self.roles,
            self.provenance,
        )

    def metadata(self) -> Dict[str, Any]:
        return {
            "n_examples": int(self.n_examples_used),
            "mode": self.mode,
            "samples": int(self.samples),
            "seed": int(self.seed),
            "provenance": dict(self.provenance),
        }


def select_examples(n_rows: int, n_examples: int, seed: int) -> np.ndarray:
    """First N rows of a seeded shuffle; the whole set once when N exceeds it."""
    order = np.random.default_rng(seed).permutation(n_rows)
    if n_examples > n_rows:
        logger.warning(
            "requested %d Fisher examples but dataset has %d rows; using all of them",
            n_examples,
            n_rows,
        )
    return order[: min(n_examples, n_rows)]


def _accumulate(
    spec: ModelSpec,
    params: ParameterSet,
    X: np.ndarray,
    weights: Optional[np.ndarray],
) -> Dict[str, np.ndarray]:
    starts = list(range(0, X.shape[0], CHUNK_ROWS))

    def work(start: int) -> Dict[str, np.ndarray]:
        stop = start + CHUNK_ROWS
        w = None if weights is None else weights[start:stop]
        sums, _ = weighted_squared_grads(spec, params, X[start:stop], w)
        return sums

    workers = min(thread_count(), len(starts))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            partials = list(pool.map(work, starts))
    else:
        partials = [work(s) for s in starts]

    # reduce in chunk order so the result does not depend on scheduling
    total = {name: np.zeros(shape) for name, shape in spec.param_shapes().items()}
    for part in partials:
        for name in total:
            total[name] += part[name]
    return total


def _prepare(
    spec: ModelSpec, params: ParameterSet, data: LabeledDataset, config: FisherConfig
) -> np.ndarray:
    check_params(spec, params)
    if len(data) == 0:
        raise DataFormatError("cannot estimate a Fisher from an empty dataset")
    if data.input_dim != spec.input_dim:
        raise DataFormatError(
            f"input dim mismatch: data has {data.input_dim}, model expects {spec.input_dim}"
        )
    return select_examples(len(data), int(config.n_examples), int(config.seed))


def _finish(
    spec: ModelSpec,
    params: ParameterSet,
    data: LabeledDataset,
    config: FisherConfig,
    total: Dict[str, np.ndarray],
    n_used: int,
) -> FisherDiagonal:
    entries = {name: total[name] / n_used for name in params.names()}
    fisher = FisherDiagonal(
        entries,
        n_examples_used=n_used,
        mode=config.mode,
        lineage_id=params.lineage_id,
        samples=int(config.samples) if config.mode == "sampled" else 0,
        seed=int(config.seed),
        roles=params.roles,
        provenance={"dataset": data.provenance, **config.to_dict()},
    )
    logger.info(
        "%s Fisher from %d examples: total mass %.6g",
        config.mode,
        n_used,
        sum(float(t.sum()) for t in fisher.entries.values()),
    )
    return fisher


def estimate_fisher_exact(
    spec: ModelSpec, params: ParameterSet, data: LabeledDataset, config: FisherConfig
) -> FisherDiagonal:
    if spec.num_classes > MAX_EXACT_CLASSES:
        raise ConfigError(
            f"exact Fisher needs at most {MAX_EXACT_CLASSES} classes, model has {spec.num_classes}"
        )
    if config.mode != "exact":
        config = FisherConfig(config.n_examples, "exact", config.samples, config.seed)
    rows = _prepare(spec, params, data, config)
    total = _accumulate(spec, params, data.features[rows], None)
    return _finish(spec, params, data, config, total, len(rows))


def estimate_fisher_sampled(
    spec: ModelSpec, params: ParameterSet, data: LabeledDataset, config: FisherConfig
) -> FisherDiagonal:
    if config.mode != "sampled":
        config = FisherConfig(config.n_examples, "sampled", config.samples, config.seed)
    rows = _prepare(spec, params, data, config)
    X = data.features[rows]
    log_probs, _ = forward_batch(spec, params, X)
    probs = np.exp(log_probs)
    probs /= probs.sum(axis=1, keepdims=True)
    rng = np.random.default_rng([int(config.seed), 1])
    counts = rng.multinomial(int(config.samples), probs)
    weights = counts / float(config.samples)
    total = _accumulate(spec, params, X, weights)
    return _finish(spec, params, data, config, total, len(rows))


def estimate_fisher(
    spec: ModelSpec, params: ParameterSet, data: LabeledDataset, config: FisherConfig
) -> FisherDiagonal:
    if config.mode == "exact":
        return estimate_fisher_exact(spec, params, data, config)
    return estimate_fisher_sampled(spec, params, data, config)


def _check_congruent(reference: Mapping[str, np.ndarray], other: Mapping[str, Any], what: str) -> None:
    if set(reference) != set(other):
        raise DataFormatError(f"{what} names do not match the parameter set")
    for name, tensor in reference.items():
        if np.shape(other[name]) != tensor.shape:
            raise DataFormatError(
                f"{what} tensor {name!r} has shape {np.shape(other[name])}, expected {tensor.shape}"
            )


def expected_kl_under_perturbation(
    spec: ModelSpec,
    params: ParameterSet,
    delta: Mapping[str, Any],
    data: LabeledDataset,
) -> float:
    """Mean over data of KL(p_theta(.|x) || p_{theta+delta}(.|x))."""
    check_params(spec, params)
    _check_congruent(params.entries, delta, "perturbation")
    if len(data) == 0:
        raise DataFormatError("empty dataset")
    moved = params.replace(
        entries={n: params[n] + np.asarray(delta[n], dtype=np.float64) for n in params.names()}
    )
    log_p = predict_log_probs(spec, params, data.features)
    log_q = predict_log_probs(spec, moved, data.features)
    kl = np.sum(np.exp(log_p) * (log_p - log_q), axis=1)
    return float(np.mean(kl))


def diagonal_quadratic_form(fisher: FisherDiagonal, delta: Mapping[str, Any]) -> float:
    """0.5 * sum_j F[j] * delta[j]**2, the diagonal second-order KL prediction."""
    _check_congruent(fisher.entries, delta, "perturbation")
    return 0.5 * float(
        sum(np.sum(fisher[n] * np.asarray(delta[n]) ** 2) for n in fisher.names())
    )


def save_fisher(fisher: FisherDiagonal, path: PathLike) -> None:
    write_tensor_file(
        path,
        fisher.entries,
        fisher.lineage_id,
        fisher.roles,
        fisher=True,
        metadata=fisher.metadata(),
    )


def load_fisher(path: PathLike) -> FisherDiagonal:
    tf = read_tensor_file(path)
    if not tf.is_fisher:
        raise CheckpointFormatError(f"{path} is not a Fisher file")
    meta = tf.metadata
    try:
        return FisherDiagonal(
            tf.entries,
            n_examples_used=int(meta["n_examples"]),
            mode=str(meta["mode"]),
            lineage_id=tf.lineage_id,
            samples=int(meta.get("samples", 0)),
            seed=int(meta.get("seed", 0)),
            roles=tf.roles,
            provenance=meta.get("provenance", {}),
        )
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, DataFormatError):
            raise
        raise CheckpointFormatError(f"malformed Fisher metadata in {path}: {exc}") from exc
