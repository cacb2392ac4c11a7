"""
Merging-coefficient grids, validation sweeps and interpolation curves.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .checkpoint import ParameterSet
from .config import CURVE_STEP, MERGE_EPSILON, REPORT_SCHEMA_VERSION, VAL_LIMIT, thread_count
from .errors import ConfigError, DataFormatError, FishMergeError, SweepError
from .fisher import FisherDiagonal
from .merging import MergeInput, MergeSpec, merge
from .models import LabeledDataset, ModelSpec, evaluate_metrics

logger = logging.getLogger(__name__)

SELECTABLE = ("accuracy", "macro_f1", "mean_log_likelihood")

Lambdas = Tuple[float, ...]


def lambda_grid(num_models: int, n_points: int, seed: int = 0) -> List[Lambdas]:
    """Pairs: n_points evenly spaced lambda_1 in [0, 1]. More models: simplex vertices,
    barycenter and n_points seeded uniform draws from the simplex."""
    if int(num_models) < 2:
        raise ConfigError(f"a lambda grid needs at least 2 models, got {num_models}")
    if int(n_points) < 2:
        raise ConfigError(f"a lambda grid needs at least 2 points, got {n_points}")
    if num_models == 2:
        return [(float(a), float(1.0 - a)) for a in np.linspace(0.0, 1.0, n_points)]

    grid: List[Lambdas] = [tuple(float(v) for v in row) for row in np.eye(num_models)]
    grid.append(tuple([1.0 / num_models] * num_models))
    draws = np.random.default_rng(seed).dirichlet(np.ones(num_models), size=n_points)
    grid.extend(tuple(float(v) for v in row) for row in draws)
    return grid


def curve_lambdas(step: float) -> List[Lambdas]:
    """lambda_1 from 0 to 1 in ``step`` increments, lambda_2 = 1 - lambda_1."""
    if not step > 0 or step > 1:
        raise ConfigError(f"step must lie in (0, 1], got {step}")
    n = int(round(1.0 / step))
    if abs(n * step - 1.0) > 1e-9:
        raise ConfigError(f"step {step} does not divide 1 evenly")
    return [(i / n, 1.0 - i / n) for i in range(n + 1)]


@dataclass(frozen=True)
class SweepPoint:
    lambdas: Lambdas
    metrics: Dict[str, float]
    target_index: int = 0

    def to_dict(self) -> Dict[str, Any]:
        return {
            "lambdas": list(self.lambdas),
            "target_index": self.target_index,
            "metrics": dict(self.metrics),
        }


@dataclass(frozen=True)
class SweepResult:
    points: List[SweepPoint]
    best_index: int
    selection_metric: str
    mode: str = "fisher"
    extra: Dict[str, Any] = field(default_factory=dict)

    @property
    def best(self) -> SweepPoint:
        return self.points[self.best_index]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "schema_version": REPORT_SCHEMA_VERSION,
            "kind": "sweep",
            "mode": self.mode,
            "selection_metric": self.selection_metric,
            "best_index": self.best_index,
            "points": [p.to_dict() for p in self.points],
            "extra": dict(self.extra),
        }

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any]) -> "SweepResult":
        if raw.get("schema_version") != REPORT_SCHEMA_VERSION or raw.get("kind") != "sweep":
            raise DataFormatError("not a sweep result of a supported schema version")
        try:
            points = [
                SweepPoint(
                    tuple(float(v) for v in p["lambdas"]),
                    {k: float(v) for k, v in p["metrics"].items()},
                    int(p.get("target_index", 0)),
                )
                for p in raw["points"]
            ]
            return cls(
                points,
                int(raw["best_index"]),
                str(raw["selection_metric"]),
                str(raw.get("mode", "fisher")),
                dict(raw.get("extra", {})),
            )
        except (KeyError, TypeError, ValueError, AttributeError) as exc:
            raise DataFormatError(f"malformed sweep result: {exc}") from exc

    def rows(self) -> List[Dict[str, Any]]:
        """One flat row per grid point, for CSV output."""
        out = []
        for k, p in enumerate(self.points):
            row: Dict[str, Any] = {"index": k, "mode": self.mode, "target_index": p.target_index}
            row.update({f"lambda_{i + 1}": v for i, v in enumerate(p.lambdas)})
            row.update(p.metrics)
            row["best"] = int(k == self.best_index)
            out.append(row)
        return out


def select_best(points: Sequence[SweepPoint], metric: str) -> int:
    """Highest metric; ties go to the most weight on the target model, then to grid order."""
    if not points:
        raise ConfigError("cannot select from an empty sweep")
    best = 0
    for k, p in enumerate(points):
        if metric not in p.metrics:
            raise ConfigError(f"selection metric {metric!r} not recorded by the sweep")
        key = (p.metrics[metric], p.lambdas[p.target_index])
        ref = points[best]
        if key > (ref.metrics[metric], ref.lambdas[ref.target_index]):
            best = k
    return best


def _run_grid(
    template: MergeSpec,
    grid: Sequence[Lambdas],
    score: Callable[[ParameterSet], Dict[str, float]],
    target_for: Callable[[Lambdas], int],
) -> List[SweepPoint]:
    if not grid:
        raise ConfigError("empty lambda grid")
    for lambdas in grid:
        if len(lambdas) != template.num_models:
            raise ConfigError(
                f"lambda vector {list(lambdas)} has {len(lambdas)} entries, expected {template.num_models}"
            )

    def work(lambdas: Lambdas) -> SweepPoint:
        target = target_for(lambdas)
        try:
            report = merge(template.with_lambdas(lambdas, target))
            metrics = score(report.merged)
        except FishMergeError as exc:
            raise SweepError(lambdas, exc) from exc
        metrics["n_fallback_entries"] = float(report.n_fallback_entries)
        logger.debug("lambdas %s: %s", lambdas, metrics)
        return SweepPoint(tuple(float(v) for v in report.lambdas), metrics, target)

    workers = min(thread_count(), len(grid))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(work, grid))
    return [work(lambdas) for lambdas in grid]


def sweep(
    model_spec: ModelSpec,
    template: MergeSpec,
    grid: Sequence[Lambdas],
    val_data: LabeledDataset,
    selection_metric: str = "accuracy",
    val_limit: Optional[int] = VAL_LIMIT,
    extra_data: Optional[Mapping[str, LabeledDataset]] = None,
) -> SweepResult:
    """Merge once per grid point and score on the first ``val_limit`` validation rows.

    ``extra_data`` sets are scored in full and recorded as ``{name}_{metric}``
    without taking part in selection.
    """
    if selection_metric not in SELECTABLE:
        raise ConfigError(f"unknown selection metric {selection_metric!r}, expected one of {SELECTABLE}")
    extra_data = dict(extra_data or {})

    def score(params: ParameterSet) -> Dict[str, float]:
        metrics = evaluate_metrics(model_spec, params, val_data, val_limit)
        for key, data in extra_data.items():
            for name, value in evaluate_metrics(model_spec, params, data).items():
                metrics[f"{key}_{name}"] = value
        return metrics

    points = _run_grid(template, grid, score, lambda _: template.target_index)
    best = select_best(points, selection_metric)
    logger.info(
        "sweep over %d points: best %s=%.4f at lambdas %s",
        len(points),
        selection_metric,
        points[best].metrics[selection_metric],
        points[best].lambdas,
    )
    return SweepResult(
        points,
        best,
        selection_metric,
        template.mode,
        {"val_limit": val_limit, "target_index": template.target_index},
    )


def interpolation_curve(
    model_spec: ModelSpec,
    pre: ParameterSet,
    ft: ParameterSet,
    iid_data: LabeledDataset,
    ood_data: LabeledDataset,
    fishers: Optional[Tuple[FisherDiagonal, FisherDiagonal]] = None,
    step: float = CURVE_STEP,
    modes: Sequence[str] = ("isotropic", "fisher"),
    epsilon: float = MERGE_EPSILON,
) -> Dict[str, SweepResult]:
    """Trace lambda_1 (weight on ``pre``) from 0 to 1 and score both tasks per point.

    The target model at each point is the one holding the larger weight
    (``ft`` on ties), so both endpoints reproduce the unmerged models.
    """
    grid = curve_lambdas(step)
    results: Dict[str, SweepResult] = {}
    for mode in modes:
        if mode == "fisher" and fishers is None:
            raise ConfigError("Fisher interpolation needs Fisher diagonals for both models")
        pair = fishers if mode == "fisher" else (None, None)
        template = MergeSpec(
            [MergeInput(pre, pair[0], 1.0), MergeInput(ft, pair[1], 1.0)],
            target_index=1,
            epsilon=epsilon,
            mode=mode,
        )

        def score(params: ParameterSet) -> Dict[str, float]:
            iid = evaluate_metrics(model_spec, params, iid_data)
            ood = evaluate_metrics(model_spec, params, ood_data)
            metrics = {f"iid_{k}": v for k, v in iid.items()}
            metrics.update({f"ood_{k}": v for k, v in ood.items()})
            return metrics

        points = _run_grid(template, grid, score, lambda lam: 0 if lam[0] > lam[1] else 1)
        results[mode] = SweepResult(
            points, select_best(points, "iid_accuracy"), "iid_accuracy", mode, {"step": step}
        )
    return results


def curve_rows(results: Mapping[str, SweepResult]) -> List[Dict[str, Any]]:
    """Wide rows: one per lambda_1 with every mode's metrics side by side."""
    modes = list(results)
    if not modes:
        return []
    rows = []
    for k, point in enumerate(results[modes[0]].points):
        row: Dict[str, Any] = {"lambda_1": point.lambdas[0], "lambda_2": point.lambdas[1]}
        for mode in modes:
            for name, value in results[mode].points[k].metrics.items():
                row[f"{mode}_{name}"] = value
        rows.append(row)
    return rows
