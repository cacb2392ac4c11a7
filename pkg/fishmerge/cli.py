import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

from . import __version__
from .checkpoint import load_checkpoint, save_checkpoint
from .config import (
    CURVE_STEP,
    FISHER_EXAMPLES,
    FISHER_SAMPLES,
    GRID_POINTS,
    MERGE_EPSILON,
    STSB_BUCKETS,
    VAL_LIMIT,
)
from .ensemble import ensemble_compare
from .errors import EXIT_OK, ConfigError, FishMergeError
from .fisher import FisherConfig, estimate_fisher, load_fisher, save_fisher
from .merging import FALLBACKS, MergeInput, MergeSpec, merge
from .models import (
    LabeledDataset,
    evaluate_metrics,
    init_params,
    load_dataset_csv,
    load_model_spec,
)
from .report import dumps_report, estimate_costs, format_table, write_csv, write_provenance, write_report
from .search import SELECTABLE, curve_rows, interpolation_curve, lambda_grid, sweep
from .timing import PhaseTimer
from .training import TrainConfig, fit, load_train_config, make_task_suite, prepare_finetune, save_task_suite
from .transfer import fisher_n_ablation, parse_n_list, suite_transfer

logger = logging.getLogger(__name__)

METRIC_ALIASES = {"acc": "accuracy", "f1": "macro_f1", "ll": "mean_log_likelihood"}


class _Parser(argparse.ArgumentParser):
    """Usage errors raise ConfigError so they share the JSON error path."""

    def error(self, message: str) -> None:  # type: ignore[override]
        raise ConfigError(f"{self.prog}: {message}")


def _count(raw: str) -> int:
    """Nonnegative integer, also accepting forms like 1.1e8."""
    try:
        value = float(raw)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {raw!r}")
    if not value.is_integer() or value < 0:
        raise argparse.ArgumentTypeError(f"expected a nonnegative integer, got {raw!r}")
    return int(value)


def _config_of(args: argparse.Namespace) -> Dict[str, Any]:
    skip = {"handler", "verbose", "timings"}
    out: Dict[str, Any] = {}
    for key, value in sorted(vars(args).items()):
        if key in skip:
            continue
        if isinstance(value, Path):
            value = str(value)
        elif isinstance(value, (list, tuple)):
            value = [str(v) if isinstance(v, Path) else v for v in value]
        out[key] = value
    return out


def _bucket(args: argparse.Namespace) -> Optional[Tuple[float, float, int]]:
    raw = getattr(args, "bucket", None)
    if not raw:
        return None
    if len(raw) not in (2, 3):
        raise ConfigError("--bucket takes LO HI [N]")
    n = raw[2] if len(raw) == 3 else STSB_BUCKETS
    if not float(n).is_integer():
        raise ConfigError(f"bucket count must be an integer, got {n}")
    return float(raw[0]), float(raw[1]), int(n)


def _data(path: Path, args: argparse.Namespace) -> LabeledDataset:
    return load_dataset_csv(path, _bucket(args))


def _metric(raw: str) -> str:
    metric = METRIC_ALIASES.get(raw, raw)
    if metric not in SELECTABLE:
        raise ConfigError(f"unknown metric {raw!r}, expected one of {SELECTABLE} or {tuple(METRIC_ALIASES)}")
    return metric


def _parse_inputs(items: Sequence[str], need_fisher: bool) -> List[MergeInput]:
    """CKPT[:FISHER[:LAMBDA]] per input."""
    inputs = []
    for item in items:
        parts = item.split(":")
        if len(parts) > 3:
            raise ConfigError(f"cannot parse input {item!r}; expected CKPT[:FISHER[:LAMBDA]]")
        params, _ = load_checkpoint(parts[0])
        fisher_path = parts[1] if len(parts) > 1 else ""
        if need_fisher and not fisher_path:
            raise ConfigError(f"input {item!r} has no Fisher file but mode is 'fisher'")
        fisher = load_fisher(fisher_path) if need_fisher else None
        try:
            weight = float(parts[2]) if len(parts) > 2 and parts[2] else 1.0
        except ValueError:
            raise ConfigError(f"invalid merging coefficient in {item!r}")
        inputs.append(MergeInput(params, fisher, weight))
    return inputs


def _emit(rows: List[Dict[str, Any]]) -> None:
    print(format_table(rows))


def _cmd_train(args: argparse.Namespace, timer: PhaseTimer) -> int:
    with timer.phase("load"):
        spec = load_model_spec(args.spec)
        data = _data(args.data, args)
        config = load_train_config(args.config) if args.config else TrainConfig()
        if args.init:
            start, _ = load_checkpoint(args.init)
            start = prepare_finetune(spec, start, config.seed)
        else:
            start = init_params(spec, args.init_seed, args.heads_mergeable)
        val = _data(args.val, args) if args.val else None
    with timer.phase("train"):
        result = fit(spec, start, data, config)
    with timer.phase("evaluate"):
        metrics = {
            "epochs": config.epochs,
            "steps": len(result.step_losses),
            "final_loss": result.epoch_losses[-1] if result.epoch_losses else None,
            "train_accuracy": evaluate_metrics(spec, result.params, data)["accuracy"],
            "val_accuracy": evaluate_metrics(spec, result.params, val)["accuracy"] if val is not None else None,
        }
    with timer.phase("write"):
        save_checkpoint(result.params, None, args.out)
        provenance = {
            **_config_of(args),
            "train": config.to_dict(),
            "model": spec.to_dict(),
            "data_provenance": data.provenance,
            "parent_lineage": start.lineage_id,
        }
        write_provenance(args.out, "train", provenance, metrics)
    _emit([{**metrics, "lineage": result.params.lineage_id}])
    return EXIT_OK


def _cmd_fisher(args: argparse.Namespace, timer: PhaseTimer) -> int:
    with timer.phase("load"):
        spec = load_model_spec(args.spec)
        params, _ = load_checkpoint(args.ckpt)
        data = _data(args.data, args)
        config = FisherConfig(args.n, args.mode, args.k, args.seed)
    with timer.phase("fisher"):
        fisher = estimate_fisher(spec, params, data, config)
    with timer.phase("write"):
        save_fisher(fisher, args.out)
        write_provenance(
            args.out,
            "fisher",
            {**_config_of(args), "fisher": config.to_dict()},
            {"n_examples_used": fisher.n_examples_used},
        )
    _emit(
        [
            {"tensor": name, "mean": float(t.mean()), "max": float(t.max())}
            for name, t in fisher.entries.items()
        ]
    )
    return EXIT_OK


def _template(args: argparse.Namespace) -> MergeSpec:
    inputs = _parse_inputs(args.inputs, need_fisher=args.mode == "fisher")
    return MergeSpec(inputs, args.target, args.eps, args.mode, args.fallback)


def _cmd_merge(args: argparse.Namespace, timer: PhaseTimer) -> int:
    with timer.phase("load"):
        spec = _template(args)
    with timer.phase("merge"):
        report = merge(spec)
    with timer.phase("write"):
        save_checkpoint(report.merged, None, args.out)
        write_provenance(args.out, "merge", _config_of(args))
        if args.report:
            write_report(args.report, "merge", report.to_json(), _config_of(args))
    summary = report.to_json()
    summary.pop("fallback_counts")
    summary["lambdas"] = ", ".join(f"{v:.4f}" for v in report.lambdas)
    _emit([summary])
    return EXIT_OK


def _cmd_sweep(args: argparse.Namespace, timer: PhaseTimer) -> int:
    metric = _metric(args.metric)
    with timer.phase("load"):
        model_spec = load_model_spec(args.spec)
        template = _template(args)
        val = _data(args.val, args)
    with timer.phase("sweep"):
        result = sweep(
            model_spec,
            template,
            lambda_grid(template.num_models, args.grid, args.grid_seed),
            val,
            metric,
            args.val_limit,
        )
    with timer.phase("write"):
        write_report(args.out, "sweep", result.to_dict(), _config_of(args))
        if args.csv:
            write_csv(args.csv, "sweep", result.rows())
    best = result.best
    _emit(
        [
            {
                "points": len(result.points),
                "best_index": result.best_index,
                "lambdas": ", ".join(f"{v:.4f}" for v in best.lambdas),
                metric: best.metrics[metric],
            }
        ]
    )
    return EXIT_OK


def _cmd_curve(args: argparse.Namespace, timer: PhaseTimer) -> int:
    modes = ("isotropic", "fisher") if args.mode == "both" else (args.mode,)
    with timer.phase("load"):
        spec = load_model_spec(args.spec)
        pre, _ = load_checkpoint(args.pre)
        ft, _ = load_checkpoint(args.ft)
        fishers = None
        if "fisher" in modes:
            if not (args.pre_fisher and args.ft_fisher):
                raise ConfigError("--pre-fisher and --ft-fisher are required for Fisher curves")
            fishers = (load_fisher(args.pre_fisher), load_fisher(args.ft_fisher))
        iid = _data(args.iid, args)
        ood = _data(args.ood, args)
    with timer.phase("sweep"):
        results = interpolation_curve(spec, pre, ft, iid, ood, fishers, args.step, modes, args.eps)
    rows = curve_rows(results)
    with timer.phase("write"):
        write_csv(args.out, "curve", rows)
        if args.json:
            payload = {"modes": {m: r.to_dict() for m, r in results.items()}}
            write_report(args.json, "curve", payload, _config_of(args))
    _emit(rows)
    return EXIT_OK


def _cmd_ensemble(args: argparse.Namespace, timer: PhaseTimer) -> int:
    with timer.phase("load"):
        spec = load_model_spec(args.spec)
        if len(args.fishers) != len(args.ckpts):
            raise ConfigError(f"got {len(args.ckpts)} checkpoints but {len(args.fishers)} Fisher files")
        models = [load_checkpoint(p)[0] for p in args.ckpts]
        fishers = [load_fisher(p) for p in args.fishers]
        test = _data(args.test, args)
    with timer.phase("evaluate"):
        report = ensemble_compare(spec, models, fishers, test)
    with timer.phase("write"):
        write_report(args.out, "ensemble", report.to_dict(), _config_of(args))
        if args.csv:
            write_csv(args.csv, "ensemble", report.rows())
    _emit(report.rows())
    return EXIT_OK


def _cmd_ablate(args: argparse.Namespace, timer: PhaseTimer) -> int:
    n_list = parse_n_list(args.n_list)
    with timer.phase("load"):
        target_spec = load_model_spec(args.spec)
        donor_spec = load_model_spec(args.donor_spec) if args.donor_spec else target_spec
        target, _ = load_checkpoint(args.target)
        donor, _ = load_checkpoint(args.donor)
        target_train = _data(args.target_data, args)
        donor_train = _data(args.donor_data, args)
        val = _data(args.val, args)
        test = _data(args.test, args)
    with timer.phase("sweep"):
        report = fisher_n_ablation(
            target_spec, donor_spec, target, donor, target_train, donor_train, val, test,
            n_list, FisherConfig(max(n_list), args.mode, args.k, args.seed), args.grid, args.val_limit,
        )
    with timer.phase("write"):
        write_report(args.out, "ablate-fisher-n", report.to_dict(), _config_of(args))
        if args.csv:
            write_csv(args.csv, "ablate-fisher-n", report.rows())
    _emit(report.rows())
    return EXIT_OK


def _cmd_transfer(args: argparse.Namespace, timer: PhaseTimer) -> int:
    config = load_train_config(args.config) if args.config else TrainConfig(seed=args.suite_seed)
    fisher_config = FisherConfig(args.fisher_n, args.mode, args.k, args.suite_seed)
    with timer.phase("transfer"):
        report = suite_transfer(
            args.suite_seed, args.target, args.donor, config, fisher_config,
            args.via, args.grid, args.val_limit,
        )
    with timer.phase("write"):
        write_report(args.out, "transfer", report.to_dict(), _config_of(args))
        if args.csv:
            write_csv(args.csv, "transfer", report.rows())
    _emit(report.rows())
    return EXIT_OK


def _cmd_suite(args: argparse.Namespace, timer: PhaseTimer) -> int:
    with timer.phase("build"):
        suite = make_task_suite(args.seed, args.n_train, args.n_val, args.n_test)
    with timer.phase("write"):
        manifest = save_task_suite(suite, args.out)
    _emit([{"task": t["name"], "family": t["family"], "classes": t["num_classes"]} for t in manifest["tasks"]])
    return EXIT_OK


def _cmd_cost(args: argparse.Namespace, timer: PhaseTimer) -> int:
    estimate = estimate_costs(
        args.params,
        args.train_tokens,
        args.fisher_examples,
        args.tokens_per_example,
        args.eval_tokens,
        args.models,
    )
    if args.out:
        write_report(args.out, "cost", estimate.to_dict(), _config_of(args))
    if args.json:
        print(dumps_report("cost", estimate.to_dict(), _config_of(args)), end="")
        return EXIT_OK
    rows = [{"item": k, "value": v} for k, v in estimate.to_dict().items()]
    print(format_table(rows, floatfmt=".4g"))
    return EXIT_OK


def _add_merge_options(p: argparse.ArgumentParser, with_lambda: bool) -> None:
    help_inputs = "CKPT[:FISHER[:LAMBDA]] per model" if with_lambda else "CKPT[:FISHER] per model"
    p.add_argument("--inputs", nargs="+", required=True, help=help_inputs)
    p.add_argument("--target", type=int, default=0, help="Index of the target model (default: 0)")
    p.add_argument("--mode", choices=("fisher", "isotropic"), default="fisher")
    p.add_argument("--eps", type=float, default=MERGE_EPSILON, help="Fallback threshold on the weighted Fisher")
    p.add_argument("--fallback", choices=FALLBACKS, default="target")


def _add_fisher_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--mode", choices=("exact", "sampled"), default="exact")
    p.add_argument("--k", type=int, default=FISHER_SAMPLES, help="Samples per example in sampled mode")
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--verbose", action="store_true", help="Log debug detail on stderr")
    common.add_argument("--timings", action="store_true", help="Print a phase timing table on stderr")

    parser = _Parser(prog="fishmerge", description="Fisher-weighted and isotropic model merging.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name: str, handler: Callable, help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, parents=[common], help=help_text, description=help_text)
        p.set_defaults(handler=handler)
        return p

    bucket_help = "Bucketize a 'target' column into N equal-width classes over [LO, HI] (default N=25)"

    p = command("train", _cmd_train, "Train or fine-tune a classifier")
    p.add_argument("--spec", type=Path, required=True, help="Model spec JSON")
    p.add_argument("--data", type=Path, required=True, help="Training CSV")
    p.add_argument("--val", type=Path, help="Validation CSV scored after training")
    p.add_argument("--config", type=Path, help="Train config JSON")
    p.add_argument("--init", type=Path, help="Checkpoint to fine-tune from")
    p.add_argument("--init-seed", type=int, default=0, help="Initialization seed when --init is absent")
    p.add_argument("--heads-mergeable", action="store_true", help="Tag head tensors as body")
    p.add_argument("--bucket", nargs="+", type=float, metavar="X", help=bucket_help)
    p.add_argument("--out", type=Path, required=True)

    p = command("fisher", _cmd_fisher, "Estimate a diagonal Fisher")
    p.add_argument("--spec", type=Path, required=True)
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--n", type=int, default=FISHER_EXAMPLES, help="Number of examples (default: 4096)")
    _add_fisher_options(p)
    p.add_argument("--bucket", nargs="+", type=float, metavar="X", help=bucket_help)
    p.add_argument("--out", type=Path, required=True)

    p = command("merge", _cmd_merge, "Merge checkpoints")
    _add_merge_options(p, with_lambda=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--report", type=Path, help="Write the merge report JSON here")

    p = command("sweep", _cmd_sweep, "Grid-search merging coefficients on validation data")
    p.add_argument("--spec", type=Path, required=True)
    _add_merge_options(p, with_lambda=False)
    p.add_argument("--grid", type=int, default=GRID_POINTS, help="Grid points (default: 50)")
    p.add_argument("--grid-seed", type=int, default=0, help="Seed for simplex grids of 3+ models")
    p.add_argument("--val", type=Path, required=True)
    p.add_argument("--metric", default="accuracy")
    p.add_argument("--val-limit", type=int, default=VAL_LIMIT)
    p.add_argument("--bucket", nargs="+", type=float, metavar="X", help=bucket_help)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--csv", type=Path, help="Also write one CSV row per grid point")

    p = command("curve", _cmd_curve, "Interpolation curve between two checkpoints")
    p.add_argument("--spec", type=Path, required=True)
    p.add_argument("--pre", type=Path, required=True)
    p.add_argument("--ft", type=Path, required=True)
    p.add_argument("--pre-fisher", type=Path)
    p.add_argument("--ft-fisher", type=Path)
    p.add_argument("--step", type=float, default=CURVE_STEP)
    p.add_argument("--iid", type=Path, required=True)
    p.add_argument("--ood", type=Path, required=True)
    p.add_argument("--mode", choices=("isotropic", "fisher", "both"), default="both")
    p.add_argument("--eps", type=float, default=MERGE_EPSILON)
    p.add_argument("--bucket", nargs="+", type=float, metavar="X", help=bucket_help)
    p.add_argument("--out", type=Path, required=True, help="Curve CSV")
    p.add_argument("--json", type=Path, help="Also write the full sweep results")

    p = command("ensemble", _cmd_ensemble, "Compare merged models with an output ensemble")
    p.add_argument("--spec", type=Path, required=True)
    p.add_argument("--ckpts", type=Path, nargs="+", required=True)
    p.add_argument("--fishers", type=Path, nargs="+", required=True)
    p.add_argument("--test", type=Path, required=True)
    p.add_argument("--bucket", nargs="+", type=float, metavar="X", help=bucket_help)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--csv", type=Path)

    p = command("ablate-fisher-n", _cmd_ablate, "Merged accuracy per Fisher example count")
    p.add_argument("--spec", type=Path, required=True, help="Target model spec")
    p.add_argument("--donor-spec", type=Path, help="Donor model spec (default: --spec)")
    p.add_argument("--target", type=Path, required=True)
    p.add_argument("--donor", type=Path, required=True)
    p.add_argument("--target-data", type=Path, required=True)
    p.add_argument("--donor-data", type=Path, required=True)
    p.add_argument("--val", type=Path, required=True)
    p.add_argument("--test", type=Path, required=True)
    p.add_argument("--n-list", default="256,1024,4096")
    _add_fisher_options(p)
    p.add_argument("--grid", type=int, default=GRID_POINTS)
    p.add_argument("--val-limit", type=int, default=VAL_LIMIT)
    p.add_argument("--bucket", nargs="+", type=float, metavar="X", help=bucket_help)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--csv", type=Path)

    p = command("transfer", _cmd_transfer, "Intermediate-task transfer on the synthetic suite")
    p.add_argument("--suite-seed", type=int, default=0)
    p.add_argument("--target", required=True, help="Target task name")
    p.add_argument("--donor", required=True, help="Donor task name")
    p.add_argument("--via", help="Extra task for the sequential fine-tuning baseline")
    p.add_argument("--config", type=Path, help="Train config JSON")
    p.add_argument("--fisher-n", type=int, default=FISHER_EXAMPLES)
    p.add_argument("--mode", choices=("exact", "sampled"), default="exact")
    p.add_argument("--k", type=int, default=FISHER_SAMPLES)
    p.add_argument("--grid", type=int, default=GRID_POINTS)
    p.add_argument("--val-limit", type=int, default=VAL_LIMIT)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--csv", type=Path)

    p = command("suite", _cmd_suite, "Write the synthetic task suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-train", type=int, default=1000)
    p.add_argument("--n-val", type=int, default=500)
    p.add_argument("--n-test", type=int, default=500)
    p.add_argument("--out", type=Path, required=True)

    p = command("cost", _cmd_cost, "FLOPs estimate for fine-tuning and merging")
    p.add_argument("--params", type=_count, required=True, help="Parameter count P")
    p.add_argument("--train-tokens", type=_count, required=True)
    p.add_argument("--fisher-examples", type=_count, default=FISHER_EXAMPLES)
    p.add_argument("--tokens-per-example", type=_count, required=True)
    p.add_argument("--eval-tokens", type=_count, default=0)
    p.add_argument("--models", type=_count, default=2)
    p.add_argument("--json", action="store_true", help="Print the report as JSON")
    p.add_argument("--out", type=Path)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    timer = PhaseTimer()
    args = None
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(
            level=logging.DEBUG if args.verbose else logging.WARNING,
            format="%(levelname)s %(name)s: %(message)s",
            stream=sys.stderr,
        )
        logger.debug("running %s with %s", args.command, _config_of(args))
        return args.handler(args, timer)
    except FishMergeError as exc:
        print(json.dumps(exc.to_json()), file=sys.stderr)
        return exc.exit_code
    finally:
        if args is not None and getattr(args, "timings", False):
            print(timer.summary(), file=sys.stderr)
