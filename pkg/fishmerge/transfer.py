"""
Intermediate-task transfer by merging, and the Fisher-example-count ablation.

The donor is a model fine-tuned on another task from the same initialization.
Merging it into the target keeps the target head and chooses lambda on the
target's validation set; gradient-based transfer baselines fine-tune through
the donor instead.
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

from .checkpoint import ParameterSet
from .config import GRID_POINTS, REPORT_SCHEMA_VERSION, VAL_LIMIT
from .errors import ConfigError
from .fisher import FisherConfig, FisherDiagonal, estimate_fisher
from .merging import MergeInput, MergeSpec
from .models import LabeledDataset, ModelSpec, evaluate_metrics
from .search import SweepResult, lambda_grid, sweep
from .training import Task, TrainConfig, finetune, make_task_suite

logger = logging.getLogger(__name__)


def _merge_sweep(
    spec: ModelSpec,
    donor: ParameterSet,
    target: ParameterSet,
    fishers: Optional[Tuple[FisherDiagonal, FisherDiagonal]],
    val: LabeledDataset,
    test: LabeledDataset,
    grid_points: int,
    val_limit: Optional[int],
    mode: str,
) -> SweepResult:
    pair = fishers if fishers is not None else (None, None)
    template = MergeSpec(
        [MergeInput(donor, pair[0]), MergeInput(target, pair[1])], target_index=1, mode=mode
    )
    return sweep(
        spec,
        template,
        lambda_grid(2, grid_points),
        val,
        "accuracy",
        val_limit,
        extra_data={"test": test},
    )


def _summary(result: SweepResult) -> Dict[str, Any]:
    best = result.best
    return {
        "val_accuracy": best.metrics["accuracy"],
        "test_accuracy": best.metrics["test_accuracy"],
        "lambdas": list(best.lambdas),
    }


@dataclass(frozen=True)
class TransferReport:
    target: str
    donor: str
    methods: Dict[str, Dict[str, Any]]
    config: Dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "schema_version": REPORT_SCHEMA_VERSION,
            "kind": "transfer",
            "target": self.target,
            "donor": self.donor,
            "methods": {k: dict(v) for k, v in self.methods.items()},
            "config": dict(self.config),
        }

    def rows(self) -> List[Dict[str, Any]]:
        return [
            {
                "method": name,
                "val_accuracy": m.get("val_accuracy"),
                "test_accuracy": m["test_accuracy"],
                "lambda_donor": m["lambdas"][0] if "lambdas" in m else None,
            }
            for name, m in self.methods.items()
        ]


def intermediate_task_transfer(
    target: Task,
    donor: Task,
    init: ParameterSet,
    train_config: TrainConfig,
    fisher_config: FisherConfig,
    via: Optional[Task] = None,
    grid_points: int = GRID_POINTS,
    val_limit: Optional[int] = VAL_LIMIT,
) -> TransferReport:
    """Compare merging a donor into the target against fine-tuning through it.

    With ``via`` the sequential baseline runs init -> via -> donor -> target.
    """
    target_model = finetune(target.spec, init, target.train, train_config)
    donor_model = finetune(donor.spec, init, donor.train, train_config)

    def scored(params: ParameterSet) -> Dict[str, Any]:
        return {
            "val_accuracy": evaluate_metrics(target.spec, params, target.val, val_limit)["accuracy"],
            "test_accuracy": evaluate_metrics(target.spec, params, target.test)["accuracy"],
        }

    methods: Dict[str, Dict[str, Any]] = {"target_only": scored(target_model)}
    methods["isotropic_merge"] = _summary(
        _merge_sweep(
            target.spec, donor_model, target_model, None,
            target.val, target.test, grid_points, val_limit, "isotropic",
        )
    )
    fishers = (
        estimate_fisher(donor.spec, donor_model, donor.train, fisher_config),
        estimate_fisher(target.spec, target_model, target.train, fisher_config),
    )
    methods["fisher_merge"] = _summary(
        _merge_sweep(
            target.spec, donor_model, target_model, fishers,
            target.val, target.test, grid_points, val_limit, "fisher",
        )
    )
    methods["intermediate_finetune"] = scored(
        finetune(target.spec, donor_model, target.train, train_config)
    )
    if via is not None:
        chain = finetune(via.spec, init, via.train, train_config)
        chain = finetune(donor.spec, chain, donor.train, train_config)
        methods["sequential_finetune"] = scored(
            finetune(target.spec, chain, target.train, train_config)
        )

    for name, m in methods.items():
        logger.info("%s -> %s %s: test accuracy %.4f", donor.name, target.name, name, m["test_accuracy"])
    config = {
        "train": train_config.to_dict(),
        "fisher": fisher_config.to_dict(),
        "grid_points": grid_points,
        "val_limit": val_limit,
        "via": via.name if via is not None else None,
    }
    return TransferReport(target.name, donor.name, methods, config)


def suite_transfer(
    suite_seed: int,
    target_name: str,
    donor_name: str,
    train_config: TrainConfig,
    fisher_config: FisherConfig,
    via_name: Optional[str] = None,
    grid_points: int = GRID_POINTS,
    val_limit: Optional[int] = VAL_LIMIT,
) -> TransferReport:
    suite = make_task_suite(suite_seed)
    via = suite.task(via_name) if via_name else None
    report = intermediate_task_transfer(
        suite.task(target_name),
        suite.task(donor_name),
        suite.init,
        train_config,
        fisher_config,
        via,
        grid_points,
        val_limit,
    )
    report.config["suite_seed"] = int(suite_seed)
    return report


@dataclass(frozen=True)
class AblationReport:
    grid: List[Dict[str, Any]]
    isotropic: Dict[str, Any]
    unmerged_target: Dict[str, float]
    config: Dict[str, Any] = field(default_factory=dict)

    def cell(self, donor_n: int, target_n: int) -> Dict[str, Any]:
        for row in self.grid:
            if row["donor_n"] == donor_n and row["target_n"] == target_n:
                return row
        raise KeyError((donor_n, target_n))

    def rows(self) -> List[Dict[str, Any]]:
        base = {"donor_n": 0, "target_n": 0, **self.isotropic}
        return [base] + [dict(r) for r in self.grid]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "schema_version": REPORT_SCHEMA_VERSION,
            "kind": "ablate-fisher-n",
            "grid": [dict(r) for r in self.grid],
            "isotropic": dict(self.isotropic),
            "unmerged_target": dict(self.unmerged_target),
            "config": dict(self.config),
        }


def parse_n_list(raw: str) -> List[int]:
    try:
        values = [int(v) for v in raw.split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"invalid example-count list {raw!r}") from exc
    if not values or any(v < 1 for v in values):
        raise ConfigError(f"example counts must be positive integers, got {raw!r}")
    return values


def fisher_n_ablation(
    target_spec: ModelSpec,
    donor_spec: ModelSpec,
    target_model: ParameterSet,
    donor_model: ParameterSet,
    target_train: LabeledDataset,
    donor_train: LabeledDataset,
    val: LabeledDataset,
    test: LabeledDataset,
    n_list: Sequence[int],
    fisher_config: FisherConfig = FisherConfig(),
    grid_points: int = GRID_POINTS,
    val_limit: Optional[int] = VAL_LIMIT,
) -> AblationReport:
    """Best-lambda merged accuracy for every (donor N, target N) pair of ``n_list``."""
    if not n_list:
        raise ConfigError("empty example-count list")

    def fisher_at(spec: ModelSpec, params: ParameterSet, data: LabeledDataset, n: int) -> FisherDiagonal:
        cfg = FisherConfig(n, fisher_config.mode, fisher_config.samples, fisher_config.seed)
        return estimate_fisher(spec, params, data, cfg)

    donor_fishers = {n: fisher_at(donor_spec, donor_model, donor_train, n) for n in n_list}
    target_fishers = {n: fisher_at(target_spec, target_model, target_train, n) for n in n_list}

    rows = []
    for dn in n_list:
        for tn in n_list:
            result = _merge_sweep(
                target_spec, donor_model, target_model, (donor_fishers[dn], target_fishers[tn]),
                val, test, grid_points, val_limit, "fisher",
            )
            rows.append({"donor_n": dn, "target_n": tn, **_summary(result)})
            logger.info("donor N=%d, target N=%d: test accuracy %.4f", dn, tn, rows[-1]["test_accuracy"])

    isotropic = _summary(
        _merge_sweep(
            target_spec, donor_model, target_model, None,
            val, test, grid_points, val_limit, "isotropic",
        )
    )
    unmerged = {
        "val_accuracy": evaluate_metrics(target_spec, target_model, val, val_limit)["accuracy"],
        "test_accuracy": evaluate_metrics(target_spec, target_model, test)["accuracy"],
    }
    config = {
        "n_list": list(n_list),
        "fisher": fisher_config.to_dict(),
        "grid_points": grid_points,
        "val_limit": val_limit,
    }
    return AblationReport(rows, isotropic, unmerged, config)


def suite_ablation(
    suite_seed: int,
    target_name: str,
    donor_name: str,
    n_list: Sequence[int],
    train_config: TrainConfig,
    fisher_config: FisherConfig = FisherConfig(),
    grid_points: int = GRID_POINTS,
    val_limit: Optional[int] = VAL_LIMIT,
    n_train: int = 1000,
    n_val: int = 500,
    n_test: int = 500,
) -> AblationReport:
    """Fisher-example ablation on two freshly fine-tuned suite tasks.

    Each cell's ``val_accuracy`` is the selection score of its best lambda,
    the figure the ablation compares across example counts.
    """
    suite = make_task_suite(suite_seed, n_train, n_val, n_test)
    target, donor = suite.task(target_name), suite.task(donor_name)
    target_model = finetune(target.spec, suite.init, target.train, train_config)
    donor_model = finetune(donor.spec, suite.init, donor.train, train_config)
    report = fisher_n_ablation(
        target.spec, donor.spec, target_model, donor_model,
        target.train, donor.train, target.val, target.test,
        n_list, fisher_config, grid_points, val_limit,
    )
    report.config.update(
        {"suite_seed": int(suite_seed), "target": target_name, "donor": donor_name, "n_train": n_train, "n_val": n_val}
    )
    return report
