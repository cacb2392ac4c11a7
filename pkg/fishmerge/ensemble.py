"""
Parameter-merged ensembles against output (prediction) ensembles.
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .checkpoint import ROLE_BODY, ParameterSet
from .config import REPORT_SCHEMA_VERSION
from .errors import ConfigError, DataFormatError
from .fisher import FisherConfig, FisherDiagonal, estimate_fisher
from .merging import MergeInput, MergeSpec, merge
from .models import (
    LabeledDataset,
    ModelSpec,
    PredictiveDistribution,
    evaluate,
    predict_log_probs,
)
from .training import TrainConfig, make_task_suite, prepare_finetune, train_seed_variants

logger = logging.getLogger(__name__)

Member = Tuple[ModelSpec, ParameterSet]


def _check_members(members: Sequence[Member]) -> None:
    if not members:
        raise ConfigError("an output ensemble needs at least one model")
    dims = {spec.input_dim for spec, _ in members}
    classes = {spec.num_classes for spec, _ in members}
    if len(classes) > 1:
        raise DataFormatError(f"class-count mismatch across ensemble members: {sorted(classes)}")
    if len(dims) > 1:
        raise DataFormatError(f"input dim mismatch across ensemble members: {sorted(dims)}")


def ensemble_log_probs(members: Sequence[Member], x: Any) -> np.ndarray:
    """log of the arithmetic mean of the members' class probabilities, per row."""
    _check_members(members)
    stack = np.stack([predict_log_probs(spec, params, x) for spec, params in members])
    # shift by the per-entry max so identical members reproduce their input exactly
    top = stack.max(axis=0)
    return top + np.log(np.exp(stack - top).mean(axis=0))


def predict_output_ensemble(members: Sequence[Member], x: Any) -> PredictiveDistribution:
    xv = np.asarray(x, dtype=np.float64)
    if xv.ndim != 1:
        raise DataFormatError("predict_output_ensemble takes a single feature vector")
    return PredictiveDistribution(ensemble_log_probs(members, xv)[0])


def ensemble_accuracy(members: Sequence[Member], data: LabeledDataset) -> float:
    if len(data) == 0:
        raise DataFormatError("empty evaluation set")
    data.check_classes(members[0][0].num_classes if members else 0)
    predictions = np.argmax(ensemble_log_probs(members, data.features), axis=1)
    return float(np.mean(predictions == data.labels))


def shared_head(params: ParameterSet) -> ParameterSet:
    """Same tensors with every role set to body, so heads merge too."""
    return params.with_roles({name: ROLE_BODY for name in params.names()})


@dataclass(frozen=True)
class EnsembleReport:
    fisher_merged: float
    isotropic_merged: float
    output_ensemble: float
    individual: List[float]
    lambdas: List[float]
    cost_ratio: Tuple[int, int]
    extra: Dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "schema_version": REPORT_SCHEMA_VERSION,
            "kind": "ensemble",
            "fisher_merged": self.fisher_merged,
            "isotropic_merged": self.isotropic_merged,
            "output_ensemble": self.output_ensemble,
            "individual": list(self.individual),
            "individual_mean": float(np.mean(self.individual)),
            "lambdas": list(self.lambdas),
            "inference_cost_ratio": f"{self.cost_ratio[0]}:{self.cost_ratio[1]}",
            **self.extra,
        }

    def rows(self) -> List[Dict[str, Any]]:
        rows: List[Dict[str, Any]] = [
            {"method": "fisher_merged", "accuracy": self.fisher_merged, "inference_cost": 1},
            {"method": "isotropic_merged", "accuracy": self.isotropic_merged, "inference_cost": 1},
            {
                "method": "output_ensemble",
                "accuracy": self.output_ensemble,
                "inference_cost": len(self.individual),
            },
        ]
        for k, acc in enumerate(self.individual):
            rows.append({"method": f"model_{k}", "accuracy": acc, "inference_cost": 1})
        return rows


def ensemble_compare(
    spec: ModelSpec,
    checkpoints: Sequence[ParameterSet],
    fishers: Sequence[FisherDiagonal],
    test_data: LabeledDataset,
) -> EnsembleReport:
    """Equal-weight Fisher merge, isotropic merge and output ensemble of same-task models."""
    if len(checkpoints) < 2:
        raise ConfigError(f"ensembling needs at least 2 checkpoints, got {len(checkpoints)}")
    if len(fishers) != len(checkpoints):
        raise ConfigError(f"got {len(checkpoints)} checkpoints but {len(fishers)} Fisher diagonals")
    models = [shared_head(p) for p in checkpoints]
    m = len(models)
    weight = 1.0 / m

    reports = {}
    for mode in ("fisher", "isotropic"):
        inputs = [
            MergeInput(p, f if mode == "fisher" else None, weight) for p, f in zip(models, fishers)
        ]
        reports[mode] = merge(MergeSpec(inputs, target_index=0, mode=mode))

    individual = [evaluate(spec, p, test_data) for p in models]
    report = EnsembleReport(
        fisher_merged=evaluate(spec, reports["fisher"].merged, test_data),
        isotropic_merged=evaluate(spec, reports["isotropic"].merged, test_data),
        output_ensemble=ensemble_accuracy([(spec, p) for p in models], test_data),
        individual=individual,
        lambdas=[weight] * m,
        cost_ratio=(m, 1),
        extra={"n_fallback_entries": reports["fisher"].n_fallback_entries},
    )
    logger.info(
        "ensemble of %d: fisher %.4f, isotropic %.4f, output %.4f",
        m,
        report.fisher_merged,
        report.isotropic_merged,
        report.output_ensemble,
    )
    return report


def ensemble_trial(
    suite_seed: int,
    task_name: str = "blobs-a",
    n_models: int = 5,
    train_config: Optional[TrainConfig] = None,
    fisher_config: Optional[FisherConfig] = None,
) -> EnsembleReport:
    """Train ``n_models`` data-order variants of one suite task and compare ensembles."""
    suite = make_task_suite(suite_seed)
    task = suite.task(task_name)
    train_config = train_config or TrainConfig(seed=suite_seed)
    fisher_config = fisher_config or FisherConfig(seed=suite_seed)
    seeds = [1000 * int(suite_seed) + k for k in range(n_models)]
    # one shared head draw so the variants differ only in data order
    init = prepare_finetune(task.spec, suite.init, suite_seed)
    models = train_seed_variants(task.spec, init, task.train, train_config, seeds)
    fishers = [estimate_fisher(task.spec, p, task.train, fisher_config) for p in models]
    report = ensemble_compare(task.spec, models, fishers, task.test)
    report.extra.update({"suite_seed": int(suite_seed), "task": task_name})
    return report
