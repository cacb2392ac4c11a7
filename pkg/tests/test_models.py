import numpy as np
import pytest

from fishmerge.errors import ConfigError, DataFormatError
from fishmerge.models import (
    LabeledDataset,
    ModelSpec,
    bucketize_regression,
    evaluate,
    evaluate_metrics,
    forward,
    init_params,
    lineage_id_for,
    load_dataset_csv,
    macro_f1,
    nll_and_grad,
    per_example_grad,
    predict_log_probs,
    reinit_head,
    save_dataset_csv,
)

ACTS = ("tanh", "relu", "identity")


def random_case(seed: int):
    rng = np.random.default_rng(seed)
    depth = int(rng.integers(0, 3))
    hidden = tuple((int(rng.integers(2, 6)), ACTS[int(rng.integers(0, 3))]) for _ in range(depth))
    spec = ModelSpec(int(rng.integers(1, 5)), hidden, int(rng.integers(2, 5)))
    params = init_params(spec, seed)
    # nudge biases off zero so relu kinks are not hit exactly
    params = params.replace(
        entries={n: t + 0.1 * rng.normal(size=t.shape) for n, t in params.entries.items()}
    )
    x = rng.normal(size=spec.input_dim)
    y = int(rng.integers(0, spec.num_classes))
    return spec, params, x, y


def log_prob(spec, params, x, y):
    return predict_log_probs(spec, params, x)[0, y]


@pytest.mark.parametrize("seed", range(60))
def test_per_example_grad_matches_finite_differences(seed):
    spec, params, x, y = random_case(seed)
    grads = per_example_grad(spec, params, x, y)
    h = 1e-5
    for name in params.names():
        numeric = np.zeros(params[name].shape)
        for idx in np.ndindex(params[name].shape):
            up = np.array(params[name])
            down = np.array(params[name])
            up[idx] += h
            down[idx] -= h
            lp_up = log_prob(spec, params.replace(entries={**params.entries, name: up}), x, y)
            lp_down = log_prob(spec, params.replace(entries={**params.entries, name: down}), x, y)
            numeric[idx] = (lp_up - lp_down) / (2 * h)
        np.testing.assert_allclose(grads[name], numeric, rtol=1e-4, atol=1e-8, err_msg=name)


def test_minibatch_gradient_is_mean_of_per_example(small_spec, small_params, small_data):
    X, y = small_data.features[:7], small_data.labels[:7]
    _, grads = nll_and_grad(small_spec, small_params, X, y)
    for name in small_params.names():
        expected = -np.mean(
            [per_example_grad(small_spec, small_params, X[i], int(y[i]))[name] for i in range(7)],
            axis=0,
        )
        np.testing.assert_allclose(grads[name], expected, rtol=1e-10, atol=1e-14)


def test_forward_is_normalized(small_spec, small_params):
    rng = np.random.default_rng(0)
    for _ in range(20):
        dist = forward(small_spec, small_params, 5.0 * rng.normal(size=3))
        assert abs(dist.probs.sum() - 1.0) < 1e-12


def test_input_dim_mismatch(small_spec, small_params):
    with pytest.raises(DataFormatError, match="input dim"):
        forward(small_spec, small_params, np.zeros(4))


def test_gradient_rejects_bad_class(small_spec, small_params):
    with pytest.raises(DataFormatError):
        per_example_grad(small_spec, small_params, np.zeros(3), 3)


def test_init_is_seeded_and_lineage_follows_spec(small_spec):
    a, b = init_params(small_spec, 1), init_params(small_spec, 1)
    for name in a.names():
        assert a[name].tobytes() == b[name].tobytes()
    assert a.lineage_id == lineage_id_for(small_spec, 1)
    assert init_params(small_spec, 2).lineage_id != a.lineage_id
    assert a.roles["head.weight"] == "head"
    assert a.roles["layer0.weight"] == "body"
    assert init_params(small_spec, 1, heads_mergeable=True).roles["head.weight"] == "body"


def test_reinit_head_keeps_body_and_lineage(small_spec, small_params):
    wider = small_spec.with_num_classes(6)
    params = reinit_head(wider, small_params, seed=0)
    assert params.lineage_id == small_params.lineage_id
    assert params["head.weight"].shape == (6, 5)
    assert params["layer0.weight"].tobytes() == small_params["layer0.weight"].tobytes()


@pytest.mark.parametrize(
    "kwargs",
    [
        {"input_dim": 0},
        {"input_dim": 2, "num_classes": 1},
        {"input_dim": 2, "hidden_layers": ((3, "sigmoid"),)},
        {"input_dim": 2, "hidden_layers": ((0, "tanh"),)},
        {"input_dim": 2, "head_name": "layer9"},
    ],
)
def test_invalid_model_spec(kwargs):
    with pytest.raises(ConfigError):
        ModelSpec(**kwargs)


def test_model_spec_roundtrip(small_spec):
    assert ModelSpec.from_dict(small_spec.to_dict()) == small_spec
    with pytest.raises(ConfigError, match="unknown"):
        ModelSpec.from_dict({**small_spec.to_dict(), "dropout": 0.1})


def test_bucketize_regression_edges():
    labels = bucketize_regression([0.0, 0.19, 0.2, 4.99, 5.0, -1.0, 7.0], 0.0, 5.0, 25)
    assert labels.tolist() == [0, 0, 1, 24, 24, 0, 24]


def test_bucketize_rejects_empty_range():
    with pytest.raises(ConfigError):
        bucketize_regression([1.0], 1.0, 1.0, 5)


def test_dataset_csv_roundtrip(small_data, temp_dir):
    path = temp_dir / "d.csv"
    save_dataset_csv(small_data, path)
    loaded = load_dataset_csv(path)
    assert loaded.features.tobytes() == small_data.features.tobytes()
    assert loaded.labels.tolist() == small_data.labels.tolist()


def test_dataset_csv_with_regression_target(temp_dir):
    path = temp_dir / "r.csv"
    path.write_text("f0,f1,target\n0.1,0.2,0.0\n0.3,0.4,2.5\n0.5,0.6,5.0\n", encoding="utf8")
    with pytest.raises(ConfigError):
        load_dataset_csv(path)
    data = load_dataset_csv(path, bucket=(0.0, 5.0, 25))
    assert data.labels.tolist() == [0, 12, 24]
    np.testing.assert_array_equal(data.targets, [0.0, 2.5, 5.0])


def test_dataset_csv_malformed_header(temp_dir):
    path = temp_dir / "bad.csv"
    path.write_text("a,b,label\n1,2,0\n", encoding="utf8")
    with pytest.raises(DataFormatError, match="header"):
        load_dataset_csv(path)


def test_labels_must_be_integral():
    with pytest.raises(DataFormatError):
        LabeledDataset(np.zeros((2, 1)), np.array([0.5, 1.0]))


def test_macro_f1():
    predictions = np.array([0, 0, 1, 1])
    labels = np.array([0, 1, 1, 1])
    # class 0: tp 1, fp 1, fn 0 -> 2/3; class 1: tp 2, fp 0, fn 1 -> 4/5
    assert macro_f1(predictions, labels, 3) == pytest.approx((2 / 3 + 4 / 5) / 2)


def test_evaluate_limit_and_ties():
    spec = ModelSpec(1, (), 2)
    params = init_params(spec, 0).replace(entries={"head.weight": np.zeros((2, 1)), "head.bias": np.zeros(2)})
    data = LabeledDataset(np.zeros((4, 1)), np.array([0, 0, 1, 1]))
    # uniform outputs: argmax ties go to class 0
    assert evaluate(spec, params, data) == 0.5
    assert evaluate(spec, params, data, limit=2) == 1.0
    metrics = evaluate_metrics(spec, params, data)
    assert metrics["mean_log_likelihood"] == pytest.approx(np.log(0.5))


def test_evaluate_empty_set(small_spec, small_params):
    empty = LabeledDataset(np.zeros((0, 3)), np.zeros(0, dtype=int))
    with pytest.raises(DataFormatError, match="empty"):
        evaluate(small_spec, small_params, empty)


def _identity_linear():
    spec = ModelSpec(2, (), 2)
    params = init_params(spec, 0).replace(entries={"head.weight": np.eye(2), "head.bias": np.zeros(2)})
    return spec, params


def test_linear_log_probs_by_hand():
    spec, params = _identity_linear()
    dist = forward(spec, params, np.array([3.0, 1.0]))
    np.testing.assert_allclose(dist.log_probs, [-0.12692801104297263, -2.1269280110429727], rtol=1e-12)


def test_linear_gradient_closed_form():
    spec, params = _identity_linear()
    x = np.array([3.0, 1.0])
    probs = np.exp(forward(spec, params, x).log_probs)
    grads = per_example_grad(spec, params, x, 1)
    residual = np.array([0.0, 1.0]) - probs
    np.testing.assert_allclose(grads["head.weight"], np.outer(residual, x), rtol=1e-12)
    np.testing.assert_allclose(grads["head.bias"], residual, rtol=1e-12)


def test_bucketize_is_monotone():
    targets = np.sort(np.random.default_rng(0).uniform(-1.0, 6.0, size=500))
    buckets = bucketize_regression(targets, 0.0, 5.0, 25)
    assert np.all(np.diff(buckets) >= 0)
    assert buckets.min() == 0 and buckets.max() == 24


def test_dead_relu_unit_has_zero_gradient():
    spec = ModelSpec(3, ((4, "relu"),), 2)
    base = init_params(spec, 0)
    params = base.replace(entries={**base.entries, "layer0.bias": np.array([-50.0, 0.0, 0.0, 0.0])})
    grads = per_example_grad(spec, params, np.array([0.3, -0.2, 0.5]), 1)
    assert not grads["layer0.weight"][0].any()
    assert grads["layer0.bias"][0] == 0.0
    assert not grads["head.weight"][:, 0].any()
