"""
Small feed-forward softmax classifiers with exact reverse-mode gradients.

Tensors are named ``layer{k}.weight`` (shape [out, in]) and ``layer{k}.bias``
for the hidden layers and ``{head_name}.weight``/``{head_name}.bias`` for the
final linear layer. The backward pass works on rows of (input, output-delta)
pairs so one routine serves per-example gradients, minibatch training and the
class-expanded squared-gradient sums of the Fisher estimator.
"""

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import log_softmax

from .checkpoint import ROLE_BODY, ROLE_HEAD, ParameterSet
from .errors import ConfigError, DataFormatError, NumericalError

logger = logging.getLogger(__name__)

ACTIVATIONS = ("tanh", "relu", "identity")

PathLike = Union[str, Path]


@dataclass(frozen=True)
class ModelSpec:
    input_dim: int
    hidden_layers: Tuple[Tuple[int, str], ...] = ()
    num_classes: int = 2
    head_name: str = "head"

    def __post_init__(self) -> None:
        layers = tuple((int(w), str(a)) for w, a in self.hidden_layers)
        object.__setattr__(self, "hidden_layers", layers)
        if int(self.input_dim) < 1:
            raise ConfigError(f"input_dim must be positive, got {self.input_dim}")
        if int(self.num_classes) < 2:
            raise ConfigError(f"num_classes must be at least 2, got {self.num_classes}")
        for width, act in layers:
            if width < 1:
                raise ConfigError(f"hidden width must be positive, got {width}")
            if act not in ACTIVATIONS:
                raise ConfigError(f"unknown activation {act!r}, expected one of {ACTIVATIONS}")
        if not self.head_name or self.head_name.startswith("layer"):
            raise ConfigError(f"invalid head name {self.head_name!r}")

    def to_dict(self) -> Dict[str, Any]:
        return {
            "input_dim": int(self.input_dim),
            "hidden_layers": [[w, a] for w, a in self.hidden_layers],
            "num_classes": int(self.num_classes),
            "head_name": self.head_name,
        }

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any]) -> "ModelSpec":
        unknown = set(raw) - {"input_dim", "hidden_layers", "num_classes", "head_name"}
        if unknown:
            raise ConfigError(f"unknown model spec keys: {', '.join(sorted(unknown))}")
        try:
            return cls(
                input_dim=int(raw["input_dim"]),
                hidden_layers=tuple(tuple(layer) for layer in raw.get("hidden_layers", [])),
                num_classes=int(raw["num_classes"]),
                head_name=raw.get("head_name", "head"),
            )
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"invalid model spec: {exc}") from exc

    def spec_hash(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf8")).hexdigest()

    def layer_names(self) -> List[str]:
        return [f"layer{k}" for k in range(len(self.hidden_layers))] + [self.head_name]

    def layer_dims(self) -> List[Tuple[int, int]]:
        """(fan_in, fan_out) per layer, head last."""
        dims = []
        fan_in = int(self.input_dim)
        for width, _ in self.hidden_layers:
            dims.append((fan_in, width))
            fan_in = width
        dims.append((fan_in, int(self.num_classes)))
        return dims

    def param_shapes(self) -> Dict[str, Tuple[int, ...]]:
        shapes: Dict[str, Tuple[int, ...]] = {}
        for name, (fan_in, fan_out) in zip(self.layer_names(), self.layer_dims()):
            shapes[f"{name}.weight"] = (fan_out, fan_in)
            shapes[f"{name}.bias"] = (fan_out,)
        return shapes

    def head_tensor_names(self) -> Tuple[str, str]:
        return f"{self.head_name}.weight", f"{self.head_name}.bias"

    def default_roles(self, heads_mergeable: bool = False) -> Dict[str, str]:
        heads = set(self.head_tensor_names())
        return {
            name: ROLE_HEAD if name in heads and not heads_mergeable else ROLE_BODY
            for name in self.param_shapes()
        }

    def with_num_classes(self, num_classes: int) -> "ModelSpec":
        return ModelSpec(self.input_dim, self.hidden_layers, num_classes, self.head_name)


def load_model_spec(path: PathLike) -> ModelSpec:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read model spec {path}: {exc}") from exc
    return ModelSpec.from_dict(raw)


@dataclass(frozen=True)
class PredictiveDistribution:
    log_probs: np.ndarray

    @property
    def probs(self) -> np.ndarray:
        return np.exp(self.log_probs)


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    features: np.ndarray
    labels: np.ndarray
    provenance: str = ""
    targets: Optional[np.ndarray] = field(default=None)

    def __post_init__(self) -> None:
        features = np.asarray(self.features, dtype=np.float64)
        if features.ndim == 1:
            features = features.reshape(-1, 1) if features.size else features.reshape(0, 1)
        labels = np.asarray(self.labels)
        if labels.size and not np.issubdtype(labels.dtype, np.integer):
            if not np.all(np.equal(np.mod(labels, 1), 0)):
                raise DataFormatError("labels must be integer class indices")
        labels = labels.astype(np.int64).reshape(-1)
        if features.ndim != 2 or features.shape[0] != labels.shape[0]:
            raise DataFormatError(
                f"row count mismatch: {features.shape[0]} feature rows, {labels.shape[0]} labels"
            )
        if labels.size and labels.min() < 0:
            raise DataFormatError("labels must be nonnegative")
        if not np.all(np.isfinite(features)):
            raise NumericalError("non-finite feature value")
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def input_dim(self) -> int:
        return int(self.features.shape[1])

    def head(self, limit: Optional[int]) -> "LabeledDataset":
        """First ``limit`` rows (all rows when limit is None)."""
        if limit is None or limit >= len(self):
            return self
        return self.take(np.arange(max(0, int(limit))))

    def take(self, indices: Sequence[int]) -> "LabeledDataset":
        idx = np.asarray(indices, dtype=np.int64)
        targets = None if self.targets is None else np.asarray(self.targets)[idx]
        return LabeledDataset(self.features[idx], self.labels[idx], self.provenance, targets)

    def check_classes(self, num_classes: int) -> None:
        if len(self) and int(self.labels.max()) >= num_classes:
            raise DataFormatError(
                f"label {int(self.labels.max())} out of range for {num_classes} classes"
            )


def bucketize_regression(
    targets: Sequence[float], lo: float, hi: float, n_buckets: int
) -> np.ndarray:
    """Equal-width buckets, right-exclusive, with the top edge clamped into the last bucket."""
    if not lo < hi:
        raise ConfigError(f"bucket range must satisfy lo < hi, got [{lo}, {hi}]")
    if int(n_buckets) < 2:
        raise ConfigError(f"n_buckets must be at least 2, got {n_buckets}")
    t = np.asarray(targets, dtype=np.float64).reshape(-1)
    if t.size == 0:
        return np.zeros(0, dtype=np.int64)
    if not np.all(np.isfinite(t)):
        raise NumericalError("non-finite regression target")
    raw = np.floor(n_buckets * (t - lo) / (hi - lo))
    return np.clip(raw, 0, n_buckets - 1).astype(np.int64)


def load_dataset_csv(
    path: PathLike,
    bucket: Optional[Tuple[float, float, int]] = None,
    provenance: Optional[str] = None,
) -> LabeledDataset:
    """Read ``f0..f{d-1}`` feature columns plus a final ``label`` or ``target`` column."""
    path = Path(path)
    try:
        with path.open(encoding="utf8") as fh:
            header = fh.readline().strip().split(",")
            rows = np.loadtxt(fh, delimiter=",", ndmin=2, dtype=np.float64)
    except (OSError, ValueError) as exc:
        raise DataFormatError(f"cannot read dataset {path}: {exc}") from exc

    expected = [f"f{i}" for i in range(len(header) - 1)]
    if len(header) < 2 or header[:-1] != expected or header[-1] not in ("label", "target"):
        raise DataFormatError(f"malformed dataset header in {path}: {','.join(header)}")
    if rows.size == 0:
        rows = rows.reshape(0, len(header))
    if rows.shape[1] != len(header):
        raise DataFormatError(f"{path}: rows have {rows.shape[1]} columns, header has {len(header)}")

    features, last = rows[:, :-1], rows[:, -1]
    prov = provenance or str(path)
    if header[-1] == "target":
        if bucket is None:
            raise ConfigError(f"{path} has regression targets; bucketization parameters required")
        lo, hi, n = bucket
        labels = bucketize_regression(last, lo, hi, n)
        return LabeledDataset(features, labels, prov, targets=last)
    return LabeledDataset(features, last, prov)


def save_dataset_csv(data: LabeledDataset, path: PathLike) -> None:
    header = [f"f{i}" for i in range(data.input_dim)] + ["label"]
    table = np.column_stack([data.features, data.labels.astype(np.float64)])
    fmt = ["%.17g"] * data.input_dim + ["%d"]
    try:
        np.savetxt(path, table, delimiter=",", header=",".join(header), comments="", fmt=fmt)
    except OSError as exc:
        raise DataFormatError(f"cannot write dataset {path}: {exc}") from exc


def lineage_id_for(spec: ModelSpec, seed: int) -> str:
    digest = hashlib.sha256(f"{spec.spec_hash()}:{int(seed)}".encode("utf8")).hexdigest()
    return digest[:16]


def _draw_layer(rng: np.random.Generator, fan_in: int, fan_out: int) -> Tuple[np.ndarray, np.ndarray]:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=(fan_out, fan_in)), np.zeros(fan_out)


def init_params(spec: ModelSpec, seed: int, heads_mergeable: bool = False) -> ParameterSet:
    """Uniform fan-in initialization, zero biases, lineage derived from (spec, seed)."""
    rng = np.random.default_rng(seed)
    entries: Dict[str, np.ndarray] = {}
    for name, (fan_in, fan_out) in zip(spec.layer_names(), spec.layer_dims()):
        w, b = _draw_layer(rng, fan_in, fan_out)
        entries[f"{name}.weight"] = w
        entries[f"{name}.bias"] = b
    return ParameterSet(entries, lineage_id_for(spec, seed), spec.default_roles(heads_mergeable))


def reinit_head(spec: ModelSpec, params: ParameterSet, seed: int) -> ParameterSet:
    """Fresh head sized for ``spec`` on top of the body of ``params``; lineage is kept."""
    rng = np.random.default_rng([int(seed), spec.num_classes])
    fan_in, fan_out = spec.layer_dims()[-1]
    w, b = _draw_layer(rng, fan_in, fan_out)
    w_name, b_name = spec.head_tensor_names()
    entries = dict(params.entries)
    entries[w_name], entries[b_name] = w, b
    roles = dict(params.roles)
    roles.setdefault(w_name, ROLE_HEAD)
    roles.setdefault(b_name, ROLE_HEAD)
    return ParameterSet(entries, params.lineage_id, roles)


def check_params(spec: ModelSpec, params: ParameterSet) -> None:
    expected = spec.param_shapes()
    actual = params.shapes()
    if set(expected) != set(actual):
        missing = sorted(set(expected) - set(actual))
        extra = sorted(set(actual) - set(expected))
        raise DataFormatError(
            f"parameters do not match model spec (missing {missing}, unexpected {extra})"
        )
    for name, shape in expected.items():
        if actual[name] != shape:
            raise DataFormatError(f"tensor {name!r} has shape {actual[name]}, spec needs {shape}")


def _activate(act: str, z: np.ndarray) -> np.ndarray:
    if act == "tanh":
        return np.tanh(z)
    if act == "relu":
        return np.maximum(z, 0.0)
    return z


def _activation_grad(act: str, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    if act == "tanh":
        return 1.0 - a * a
    if act == "relu":
        return (z > 0).astype(np.float64)
    return np.ones_like(z)


@dataclass
class _LayerCache:
    name: str
    activation: str
    a_prev: np.ndarray
    z: np.ndarray
    a: np.ndarray


def _as_batch(spec: ModelSpec, x: Any) -> np.ndarray:
    X = np.asarray(x, dtype=np.float64)
    if X.ndim == 1:
        X = X.reshape(1, -1)
    if X.ndim != 2 or X.shape[1] != spec.input_dim:
        got = X.shape[-1] if X.ndim else 0
        raise DataFormatError(f"input dim mismatch: got {got}, model expects {spec.input_dim}")
    return X


def forward_batch(
    spec: ModelSpec, params: ParameterSet, x: Any
) -> Tuple[np.ndarray, List[_LayerCache]]:
    """Log-probabilities for a batch of inputs plus the activations backprop needs."""
    X = _as_batch(spec, x)
    caches: List[_LayerCache] = []
    a = X
    acts = [act for _, act in spec.hidden_layers] + ["identity"]
    for name, act in zip(spec.layer_names(), acts):
        z = a @ params[f"{name}.weight"].T + params[f"{name}.bias"]
        out = _activate(act, z)
        caches.append(_LayerCache(name, act, a, z, out))
        a = out
    return log_softmax(a, axis=1), caches


def predict_log_probs(spec: ModelSpec, params: ParameterSet, x: Any) -> np.ndarray:
    check_params(spec, params)
    log_probs, _ = forward_batch(spec, params, x)
    return log_probs


def forward(spec: ModelSpec, params: ParameterSet, x: Any) -> PredictiveDistribution:
    xv = np.asarray(x, dtype=np.float64)
    if xv.ndim != 1:
        raise DataFormatError("forward takes a single feature vector")
    return PredictiveDistribution(predict_log_probs(spec, params, xv)[0])


def _backward(
    params: ParameterSet, caches: List[_LayerCache], delta_out: np.ndarray
) -> List[Tuple[str, np.ndarray, np.ndarray]]:
    """Per-row (layer, delta, layer input) triples; row r's weight gradient is outer(delta[r], a_prev[r])."""
    out = []
    delta = delta_out
    for k in range(len(caches) - 1, -1, -1):
        cache = caches[k]
        if k < len(caches) - 1:
            delta = delta * _activation_grad(cache.activation, cache.z, cache.a)
        out.append((cache.name, delta, cache.a_prev))
        if k > 0:
            delta = delta @ params[f"{cache.name}.weight"]
    return out


def per_example_grad(
    spec: ModelSpec, params: ParameterSet, x: Any, y: int
) -> Dict[str, np.ndarray]:
    """Gradient of log p(y|x) with respect to every tensor of ``params``."""
    check_params(spec, params)
    xv = np.asarray(x, dtype=np.float64)
    if xv.ndim != 1:
        raise DataFormatError("per_example_grad takes a single feature vector")
    if not 0 <= int(y) < spec.num_classes:
        raise DataFormatError(f"class index {y} out of range for {spec.num_classes} classes")
    log_probs, caches = forward_batch(spec, params, xv)
    delta_out = -np.exp(log_probs)
    delta_out[0, int(y)] += 1.0
    grads: Dict[str, np.ndarray] = {}
    for name, delta, a_prev in _backward(params, caches, delta_out):
        grads[f"{name}.weight"] = np.outer(delta[0], a_prev[0])
        grads[f"{name}.bias"] = delta[0].copy()
    return {name: grads[name] for name in params.names()}


def nll_and_grad(
    spec: ModelSpec, params: ParameterSet, X: np.ndarray, y: np.ndarray
) -> Tuple[float, Dict[str, np.ndarray]]:
    """Mean negative log-likelihood of a minibatch and its gradient."""
    log_probs, caches = forward_batch(spec, params, X)
    rows = np.arange(len(y))
    loss = -float(np.mean(log_probs[rows, y]))
    delta_out = np.exp(log_probs)
    delta_out[rows, y] -= 1.0
    delta_out /= len(y)
    grads: Dict[str, np.ndarray] = {}
    for name, delta, a_prev in _backward(params, caches, delta_out):
        grads[f"{name}.weight"] = delta.T @ a_prev
        grads[f"{name}.bias"] = delta.sum(axis=0)
    return loss, grads


def weighted_squared_grads(
    spec: ModelSpec, params: ParameterSet, X: np.ndarray, weights: Optional[np.ndarray] = None
) -> Tuple[Dict[str, np.ndarray], np.ndarray]:
    """Sum over examples b and classes c of w[b, c] * (grad log p(c|x_b))**2.

    ``weights`` defaults to the model's own class probabilities, which gives
    the exact expectation over y. Returns the sums and the probabilities.
    """
    log_probs, caches = forward_batch(spec, params, X)
    probs = np.exp(log_probs)
    w = probs if weights is None else np.asarray(weights, dtype=np.float64)
    idx_b, idx_c = np.nonzero(w > 0)
    row_w = w[idx_b, idx_c]

    sums = {name: np.zeros(shape) for name, shape in spec.param_shapes().items()}
    if idx_b.size == 0:
        return sums, probs

    delta_out = -probs[idx_b]
    delta_out[np.arange(idx_b.size), idx_c] += 1.0
    expanded = [
        _LayerCache(c.name, c.activation, c.a_prev[idx_b], c.z[idx_b], c.a[idx_b]) for c in caches
    ]
    for name, delta, a_prev in _backward(params, expanded, delta_out):
        d2 = delta * delta
        sums[f"{name}.weight"] = (row_w[:, None] * d2).T @ (a_prev * a_prev)
        sums[f"{name}.bias"] = row_w @ d2
    return sums, probs


def macro_f1(predictions: np.ndarray, labels: np.ndarray, num_classes: int) -> float:
    """Unweighted mean of per-class F1 over classes present in labels or predictions."""
    scores = []
    for c in range(num_classes):
        tp = int(np.sum((predictions == c) & (labels == c)))
        fp = int(np.sum((predictions == c) & (labels != c)))
        fn = int(np.sum((predictions != c) & (labels == c)))
        if tp + fp + fn == 0:
            continue
        scores.append(2.0 * tp / (2 * tp + fp + fn))
    return float(np.mean(scores)) if scores else 0.0


def metrics_from_log_probs(log_probs: np.ndarray, labels: np.ndarray) -> Dict[str, float]:
    predictions = np.argmax(log_probs, axis=1)
    return {
        "accuracy": float(np.mean(predictions == labels)),
        "macro_f1": macro_f1(predictions, labels, log_probs.shape[1]),
        "mean_log_likelihood": float(np.mean(log_probs[np.arange(len(labels)), labels])),
    }


def evaluate_metrics(
    spec: ModelSpec, params: ParameterSet, data: LabeledDataset, limit: Optional[int] = None
) -> Dict[str, float]:
    subset = data.head(limit)
    if len(subset) == 0:
        raise DataFormatError("empty evaluation set")
    subset.check_classes(spec.num_classes)
    return metrics_from_log_probs(predict_log_probs(spec, params, subset.features), subset.labels)


def evaluate(
    spec: ModelSpec, params: ParameterSet, data: LabeledDataset, limit: Optional[int] = None
) -> float:
    """Argmax accuracy on the first ``limit`` rows; ties go to the lowest class index."""
    return evaluate_metrics(spec, params, data, limit)["accuracy"]
