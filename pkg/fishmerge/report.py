"""
FLOPs accounting and versioned JSON/CSV report files.
"""

import csv
import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Union

from tabulate import tabulate

from .config import REPORT_SCHEMA_VERSION
from .errors import ConfigError, DataFormatError

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

TRAIN_FLOPS_PER_TOKEN = 6
EVAL_FLOPS_PER_TOKEN = 2
# multiply, accumulate and divide per coordinate per model
MERGE_FLOPS_PER_COORD = 3

CSV_MARKER = "# fishmerge"


@dataclass(frozen=True)
class CostEstimate:
    train_flops: float
    fisher_flops: float
    merge_flops: float
    eval_flops: float

    @property
    def fisher_merge_flops(self) -> float:
        return self.fisher_flops + self.merge_flops + self.eval_flops

    @property
    def isotropic_merge_flops(self) -> float:
        return self.merge_flops + self.eval_flops

    def ratios(self) -> Dict[str, Optional[float]]:
        """Fine-tuning cost over each merging cost; None when a merging cost is zero."""

        def ratio(den: float) -> Optional[float]:
            return self.train_flops / den if den > 0 else None

        return {
            "train_over_fisher_merge": ratio(self.fisher_merge_flops),
            "train_over_isotropic_merge": ratio(self.isotropic_merge_flops),
        }

    def to_dict(self) -> Dict[str, Any]:
        return {
            **asdict(self),
            "fisher_merge_flops": self.fisher_merge_flops,
            "isotropic_merge_flops": self.isotropic_merge_flops,
            **self.ratios(),
        }


def estimate_costs(
    param_count: int,
    train_tokens: int,
    fisher_examples: int,
    tokens_per_example: int,
    eval_tokens: int,
    n_models: int = 2,
) -> CostEstimate:
    """Training 6PT, forward 2PT, Fisher as training on N examples, merge 3PM."""
    args = {
        "param_count": param_count,
        "train_tokens": train_tokens,
        "fisher_examples": fisher_examples,
        "tokens_per_example": tokens_per_example,
        "eval_tokens": eval_tokens,
        "n_models": n_models,
    }
    for name, value in args.items():
        if value < 0:
            raise ConfigError(f"{name} must be nonnegative, got {value}")
    p = float(param_count)
    return CostEstimate(
        train_flops=TRAIN_FLOPS_PER_TOKEN * p * train_tokens,
        fisher_flops=TRAIN_FLOPS_PER_TOKEN * p * fisher_examples * tokens_per_example,
        merge_flops=MERGE_FLOPS_PER_COORD * p * n_models,
        eval_flops=EVAL_FLOPS_PER_TOKEN * p * eval_tokens,
    )


def dumps_report(kind: str, payload: Mapping[str, Any], config: Optional[Mapping[str, Any]] = None) -> str:
    body = dict(payload)
    body["schema_version"] = REPORT_SCHEMA_VERSION
    body["kind"] = kind
    if config is not None:
        body["config"] = dict(config)
    return json.dumps(body, indent=2, sort_keys=True) + "\n"


def write_report(
    path: PathLike, kind: str, payload: Mapping[str, Any], config: Optional[Mapping[str, Any]] = None
) -> None:
    try:
        Path(path).write_text(dumps_report(kind, payload, config), encoding="utf8")
    except OSError as exc:
        raise DataFormatError(f"cannot write report {path}: {exc}") from exc
    logger.info("wrote %s report to %s", kind, path)


def load_report(path: PathLike, kind: Optional[str] = None) -> Dict[str, Any]:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise DataFormatError(f"cannot read report {path}: {exc}") from exc
    if not isinstance(raw, dict) or raw.get("schema_version") != REPORT_SCHEMA_VERSION:
        raise DataFormatError(f"{path} is not a report of schema version {REPORT_SCHEMA_VERSION}")
    if kind is not None and raw.get("kind") != kind:
        raise DataFormatError(f"{path} holds a {raw.get('kind')!r} report, expected {kind!r}")
    return raw


def _columns(rows: Sequence[Mapping[str, Any]]) -> List[str]:
    columns: List[str] = []
    for row in rows:
        columns.extend(k for k in row if k not in columns)
    return columns


def write_csv(path: PathLike, kind: str, rows: Sequence[Mapping[str, Any]]) -> None:
    """One header line naming schema and kind, then a plain CSV table."""
    columns = _columns(rows)
    try:
        with open(path, "w", newline="", encoding="utf8") as fh:
            fh.write(f"{CSV_MARKER} schema_version={REPORT_SCHEMA_VERSION} kind={kind}\n")
            writer = csv.DictWriter(fh, fieldnames=columns, restval="", lineterminator="\n")
            writer.writeheader()
            for row in rows:
                writer.writerow({k: ("" if v is None else v) for k, v in row.items()})
    except OSError as exc:
        raise DataFormatError(f"cannot write CSV {path}: {exc}") from exc
    logger.info("wrote %d %s rows to %s", len(rows), kind, path)


def _parse_cell(value: str) -> Any:
    if value == "":
        return None
    try:
        number = float(value)
    except ValueError:
        return value
    if number.is_integer() and "." not in value and "e" not in value.lower():
        return int(value)
    return number


def load_csv(path: PathLike, kind: Optional[str] = None) -> List[Dict[str, Any]]:
    try:
        lines = Path(path).read_text(encoding="utf8").splitlines()
    except OSError as exc:
        raise DataFormatError(f"cannot read CSV {path}: {exc}") from exc
    if not lines or not lines[0].startswith(CSV_MARKER):
        raise DataFormatError(f"{path} lacks the fishmerge CSV marker line")
    fields = dict(part.split("=", 1) for part in lines[0][len(CSV_MARKER):].split() if "=" in part)
    if fields.get("schema_version") != str(REPORT_SCHEMA_VERSION):
        raise DataFormatError(f"{path} has unsupported schema version {fields.get('schema_version')!r}")
    if kind is not None and fields.get("kind") != kind:
        raise DataFormatError(f"{path} holds {fields.get('kind')!r} rows, expected {kind!r}")
    reader = csv.DictReader(lines[1:])
    return [{k: _parse_cell(v) for k, v in row.items()} for row in reader]


def provenance_path(out: PathLike) -> Path:
    out = Path(out)
    return out.with_name(out.name + ".provenance.json")


def write_provenance(
    out: PathLike, command: str, config: Mapping[str, Any], metrics: Optional[Mapping[str, Any]] = None
) -> Path:
    """Sidecar next to a binary output recording the command, its configuration and any final metrics."""
    path = provenance_path(out)
    payload: Dict[str, Any] = {"command": command, "output": Path(out).name}
    if metrics is not None:
        payload["metrics"] = dict(metrics)
    write_report(path, "provenance", payload, config)
    return path


def format_table(rows: Sequence[Mapping[str, Any]], floatfmt: str = ".4f") -> str:
    columns = _columns(rows)
    body = [[row.get(c, "") for c in columns] for row in rows]
    return tabulate(body, headers=columns, tablefmt="grid", floatfmt=floatfmt)
