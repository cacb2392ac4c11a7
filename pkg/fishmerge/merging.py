"""
Isotropic and Fisher-weighted parameter averaging.

For every mergeable coordinate j the Fisher merge is

    theta*[j] = sum_i lam_i F_i[j] theta_i[j] / sum_i lam_i F_i[j]

which maximizes sum_i lam_i log N(theta; theta_i, diag(F_i)^-1). Where the
weighted Fisher sum is below ``epsilon`` the coordinate falls back to the
target model (or to the plain lambda-weighted average). Head tensors and
other private tensors always come from the target model.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .checkpoint import MergePartition, ParameterSet, check_merge_compatibility
from .config import MERGE_EPSILON
from .errors import CompatibilityError, ConfigError, DataFormatError, NumericalError
from .fisher import FisherDiagonal

logger = logging.getLogger(__name__)

MODES = ("isotropic", "fisher")
FALLBACKS = ("target", "average")


@dataclass(frozen=True, eq=False)
class MergeInput:
    params: ParameterSet
    fisher: Optional[FisherDiagonal] = None
    weight: float = 1.0


def normalize_lambdas(weights: Sequence[float]) -> Tuple[float, ...]:
    values = [float(w) for w in weights]
    if not values:
        raise ConfigError("no merging coefficients given")
    for w in values:
        if not math.isfinite(w) or w < 0:
            raise ConfigError(f"merging coefficients must be finite and nonnegative, got {w}")
    # fsum is exactly rounded, so the total is independent of input order
    total = math.fsum(values)
    if total == 0.0:
        raise ConfigError("all merging coefficients are zero")
    return tuple(w / total for w in values)


@dataclass(frozen=True, eq=False)
class MergeSpec:
    inputs: Sequence[MergeInput]
    target_index: int = 0
    epsilon: float = MERGE_EPSILON
    mode: str = "fisher"
    fallback: str = "target"
    lambdas: Tuple[float, ...] = field(init=False)
    partition: MergePartition = field(init=False)

    def __post_init__(self) -> None:
        inputs = tuple(self.inputs)
        object.__setattr__(self, "inputs", inputs)
        if not inputs:
            raise ConfigError("merge needs at least one input")
        if self.mode not in MODES:
            raise ConfigError(f"unknown merge mode {self.mode!r}, expected one of {MODES}")
        if self.fallback not in FALLBACKS:
            raise ConfigError(f"unknown fallback {self.fallback!r}, expected one of {FALLBACKS}")
        if not (isinstance(self.epsilon, (int, float)) and self.epsilon > 0):
            raise ConfigError(f"epsilon must be positive, got {self.epsilon}")
        if not 0 <= int(self.target_index) < len(inputs):
            raise ConfigError(
                f"target index {self.target_index} out of range for {len(inputs)} inputs"
            )
        object.__setattr__(self, "lambdas", normalize_lambdas([i.weight for i in inputs]))
        partition = check_merge_compatibility([i.params for i in inputs])
        object.__setattr__(self, "partition", partition)
        if self.mode == "fisher":
            for k, item in enumerate(inputs):
                _check_fisher(k, item, partition.mergeable)

    @property
    def num_models(self) -> int:
        return len(self.inputs)

    @property
    def target(self) -> ParameterSet:
        return self.inputs[self.target_index].params

    def with_lambdas(self, weights: Sequence[float], target_index: Optional[int] = None) -> "MergeSpec":
        if len(weights) != len(self.inputs):
            raise ConfigError(f"expected {len(self.inputs)} merging coefficients, got {len(weights)}")
        return MergeSpec(
            [MergeInput(i.params, i.fisher, w) for i, w in zip(self.inputs, weights)],
            self.target_index if target_index is None else target_index,
            self.epsilon,
            self.mode,
            self.fallback,
        )


def _check_fisher(k: int, item: MergeInput, mergeable: Sequence[str]) -> None:
    if item.fisher is None:
        raise ConfigError(f"input {k} has no Fisher diagonal but mode is 'fisher'")
    if item.fisher.lineage_id != item.params.lineage_id:
        raise CompatibilityError(
            f"lineage mismatch between input {k} and its Fisher "
            f"({item.params.lineage_id} vs {item.fisher.lineage_id})"
        )
    for name in mergeable:
        if name not in item.fisher.entries:
            raise DataFormatError(f"Fisher of input {k} lacks tensor {name!r}")
        f = item.fisher[name]
        if f.shape != item.params[name].shape:
            raise DataFormatError(
                f"Fisher of input {k} has shape {f.shape} for {name!r}, "
                f"parameters have {item.params[name].shape}"
            )
        if np.any(f < 0) or not np.all(np.isfinite(f)):
            raise NumericalError(f"corrupt Fisher for input {k}: negative or non-finite entry in {name!r}")


@dataclass(frozen=True, eq=False)
class MergeReport:
    merged: ParameterSet
    n_fallback_entries: int
    objective_value: float
    fallback_counts: Dict[str, int]
    lambdas: Tuple[float, ...]
    mode: str
    epsilon: float
    target_index: int
    fallback: str

    def to_json(self) -> Dict[str, Any]:
        return {
            "mode": self.mode,
            "lambdas": list(self.lambdas),
            "target_index": self.target_index,
            "epsilon": self.epsilon,
            "fallback": self.fallback,
            "n_fallback_entries": self.n_fallback_entries,
            "fallback_counts": dict(self.fallback_counts),
            "objective_value": self.objective_value,
            "lineage_id": self.merged.lineage_id,
            "num_parameters": self.merged.num_parameters(),
        }


def _canonical_sum(stack: np.ndarray) -> np.ndarray:
    """Sum over axis 0 in sorted order, so permuting the inputs cannot change a bit."""
    return np.sort(stack, axis=0).sum(axis=0)


def _merge_tensor(
    spec: MergeSpec, name: str, active: List[int], fisher_weighted: bool
) -> Tuple[np.ndarray, int]:
    thetas = np.stack([spec.inputs[i].params[name] for i in active])
    lam = np.array([spec.lambdas[i] for i in active]).reshape((-1,) + (1,) * (thetas.ndim - 1))
    if len(active) == 1 and not fisher_weighted:
        return thetas[0].copy(), 0

    if not fisher_weighted:
        value = _canonical_sum(lam * thetas)
        return np.clip(value, thetas.min(axis=0), thetas.max(axis=0)), 0

    fishers = np.stack([spec.inputs[i].fisher[name] for i in active])
    weighted = lam * fishers
    denom = _canonical_sum(weighted)
    ok = denom >= spec.epsilon
    if len(active) == 1:
        value = thetas[0].copy()
    else:
        numer = _canonical_sum(weighted * thetas)
        with np.errstate(divide="ignore", invalid="ignore"):
            value = np.where(ok, numer / np.where(ok, denom, 1.0), 0.0)
        # equal Fisher entries cancel out of the weighted mean
        uniform = np.all(fishers == fishers[0], axis=0)
        value = np.where(uniform, _canonical_sum(lam * thetas), value)
        value = np.clip(value, thetas.min(axis=0), thetas.max(axis=0))

    n_fallback = int(np.count_nonzero(~ok))
    if n_fallback:
        if spec.fallback == "target":
            default = spec.target[name]
        else:
            default = _canonical_sum(lam * thetas) / _canonical_sum(np.broadcast_to(lam, thetas.shape))
        value = np.where(ok, value, default)
    return value, n_fallback


def _merge(spec: MergeSpec, fisher_weighted: bool) -> MergeReport:
    mergeable = set(spec.partition.mergeable)
    active = [i for i, lam in enumerate(spec.lambdas) if lam > 0]
    target = spec.target

    entries: Dict[str, np.ndarray] = {}
    fallback_counts: Dict[str, int] = {}
    for name in target.names():
        if name not in mergeable:
            entries[name] = target[name]
            continue
        entries[name], fallback_counts[name] = _merge_tensor(spec, name, active, fisher_weighted)
        logger.debug("merged %s: %d fallback entries", name, fallback_counts[name])

    merged = ParameterSet(entries, target.lineage_id, target.roles)
    n_fallback = sum(fallback_counts.values())
    if n_fallback:
        logger.warning(
            "%d coordinates had a weighted Fisher below %g and used the %s fallback",
            n_fallback,
            spec.epsilon,
            spec.fallback,
        )
    return MergeReport(
        merged=merged,
        n_fallback_entries=n_fallback,
        objective_value=merge_objective(merged, spec),
        fallback_counts=fallback_counts,
        lambdas=spec.lambdas,
        mode=spec.mode,
        epsilon=float(spec.epsilon),
        target_index=int(spec.target_index),
        fallback=spec.fallback,
    )


def merge_isotropic(spec: MergeSpec) -> MergeReport:
    if spec.mode != "isotropic":
        raise ConfigError(f"merge_isotropic needs mode 'isotropic', spec has {spec.mode!r}")
    return _merge(spec, fisher_weighted=False)


def merge_fisher(spec: MergeSpec) -> MergeReport:
    if spec.mode != "fisher":
        raise ConfigError(f"merge_fisher needs mode 'fisher', spec has {spec.mode!r}")
    return _merge(spec, fisher_weighted=True)


def merge(spec: MergeSpec) -> MergeReport:
    if spec.mode == "fisher":
        return merge_fisher(spec)
    return merge_isotropic(spec)


def merge_objective(theta: Any, spec: MergeSpec) -> float:
    """-1/2 sum_i lam_i sum_j F_i[j] (theta[j] - theta_i[j])**2 over mergeable tensors.

    ``theta`` is a ParameterSet or a name -> array mapping. Isotropic specs
    use F_i = 1.
    """
    values: Mapping[str, np.ndarray] = theta.entries if isinstance(theta, ParameterSet) else theta
    total = 0.0
    for name in spec.partition.mergeable:
        if name not in values:
            raise CompatibilityError(f"theta lacks mergeable tensor {name!r}")
        t = np.asarray(values[name], dtype=np.float64)
        if t.shape != spec.target[name].shape:
            raise CompatibilityError(f"shape conflict on {name!r}: {t.shape} vs {spec.target[name].shape}")
        for lam, item in zip(spec.lambdas, spec.inputs):
            resid = t - item.params[name]
            if spec.mode == "fisher":
                total += lam * float(np.sum(item.fisher[name] * resid * resid))
            else:
                total += lam * float(np.sum(resid * resid))
    return -0.5 * total
