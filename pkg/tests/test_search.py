import pytest

from fishmerge.errors import ConfigError, DataFormatError, SweepError
from fishmerge.merging import MergeInput, MergeSpec
from fishmerge.models import evaluate_metrics
from fishmerge.search import (
    SweepPoint,
    SweepResult,
    curve_lambdas,
    curve_rows,
    interpolation_curve,
    lambda_grid,
    select_best,
    sweep,
)


def pair_template(blob_pair, mode="fisher"):
    (ma, mb), (fa, fb) = blob_pair["models"], blob_pair["fishers"]
    if mode == "isotropic":
        fa = fb = None
    return MergeSpec([MergeInput(ma, fa), MergeInput(mb, fb)], target_index=1, mode=mode)


def test_pair_grid_is_evenly_spaced():
    grid = lambda_grid(2, 11)
    assert len(grid) == 11
    assert grid[0] == (0.0, 1.0) and grid[-1] == (1.0, 0.0)
    assert grid[5][0] == pytest.approx(0.5)
    assert all(sum(lam) == pytest.approx(1.0) for lam in grid)
    assert len(lambda_grid(2, 50)) == 50


def test_simplex_grid_has_vertices_and_barycenter():
    grid = lambda_grid(3, 10, seed=1)
    assert len(grid) == 3 + 1 + 10
    assert grid[:3] == [(1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0)]
    assert grid[3] == pytest.approx((1 / 3, 1 / 3, 1 / 3))
    assert all(min(lam) >= 0 and sum(lam) == pytest.approx(1.0) for lam in grid)
    assert lambda_grid(3, 10, seed=1) == grid
    assert lambda_grid(3, 10, seed=2) != grid


@pytest.mark.parametrize("models, points", [(1, 10), (2, 1)])
def test_grid_arguments(models, points):
    with pytest.raises(ConfigError):
        lambda_grid(models, points)


def test_curve_lambdas():
    grid = curve_lambdas(0.1)
    assert len(grid) == 11
    assert grid[0] == (0.0, 1.0) and grid[-1] == (1.0, 0.0)
    assert grid[3] == (0.3, 0.7)
    assert curve_lambdas(1.0) == [(0.0, 1.0), (1.0, 0.0)]


@pytest.mark.parametrize("step", [0.0, -0.1, 1.5, 0.3])
def test_curve_step_must_divide_one(step):
    with pytest.raises(ConfigError):
        curve_lambdas(step)


def test_select_best_prefers_target_weight_on_ties():
    points = [
        SweepPoint((0.8, 0.2), {"accuracy": 0.9}, target_index=1),
        SweepPoint((0.3, 0.7), {"accuracy": 0.9}, target_index=1),
        SweepPoint((0.3, 0.7), {"accuracy": 0.9}, target_index=1),
        SweepPoint((0.0, 1.0), {"accuracy": 0.85}, target_index=1),
    ]
    assert select_best(points, "accuracy") == 1
    assert select_best(points[:1], "accuracy") == 0
    with pytest.raises(ConfigError, match="not recorded"):
        select_best(points, "macro_f1")
    with pytest.raises(ConfigError, match="empty"):
        select_best([], "accuracy")


@pytest.mark.parametrize("mode", ["fisher", "isotropic"])
def test_target_endpoint_reproduces_unmerged_model(blob_pair, mode):
    spec = blob_pair["spec"]
    _, task_b = blob_pair["tasks"]
    result = sweep(spec, pair_template(blob_pair, mode), lambda_grid(2, 11), task_b.val, val_limit=100)
    endpoint = result.points[0]
    assert endpoint.lambdas == (0.0, 1.0)
    expected = evaluate_metrics(spec, blob_pair["models"][1], task_b.val, 100)
    for name, value in expected.items():
        assert endpoint.metrics[name] == value
    assert "n_fallback_entries" in endpoint.metrics


def test_sweep_selects_the_best_point(blob_pair):
    _, task_b = blob_pair["tasks"]
    result = sweep(
        blob_pair["spec"],
        pair_template(blob_pair),
        lambda_grid(2, 11),
        task_b.val,
        extra_data={"test": task_b.test},
    )
    best = result.best.metrics["accuracy"]
    assert all(p.metrics["accuracy"] <= best for p in result.points)
    assert "test_accuracy" in result.best.metrics
    assert result.extra["target_index"] == 1
    rows = result.rows()
    assert len(rows) == 11
    assert sum(r["best"] for r in rows) == 1
    assert {"index", "mode", "lambda_1", "lambda_2", "accuracy", "macro_f1"} <= set(rows[0])


def test_sweep_ignores_thread_count(blob_pair, monkeypatch):
    _, task_b = blob_pair["tasks"]
    runs = []
    for threads in ("1", "4"):
        monkeypatch.setenv("FISHMERGE_THREADS", threads)
        runs.append(sweep(blob_pair["spec"], pair_template(blob_pair), lambda_grid(2, 8), task_b.val))
    assert runs[0].points == runs[1].points
    assert runs[0].best_index == runs[1].best_index


def test_sweep_result_roundtrip(blob_pair):
    _, task_b = blob_pair["tasks"]
    result = sweep(blob_pair["spec"], pair_template(blob_pair), lambda_grid(2, 5), task_b.val)
    again = SweepResult.from_dict(result.to_dict())
    assert again.points == result.points
    assert again.best_index == result.best_index
    assert again.mode == "fisher"
    with pytest.raises(DataFormatError):
        SweepResult.from_dict({**result.to_dict(), "kind": "curve"})
    with pytest.raises(DataFormatError, match="malformed"):
        SweepResult.from_dict({"schema_version": 1, "kind": "sweep", "points": [{}]})


def test_failed_point_names_its_lambdas(blob_pair):
    _, task_b = blob_pair["tasks"]
    with pytest.raises(SweepError) as info:
        sweep(blob_pair["spec"], pair_template(blob_pair), [(0.5, 0.5), (0.0, 0.0)], task_b.val)
    assert info.value.lambdas == [0.0, 0.0]
    assert isinstance(info.value.cause, ConfigError)
    assert info.value.exit_code == ConfigError.exit_code


def test_sweep_argument_errors(blob_pair):
    _, task_b = blob_pair["tasks"]
    template = pair_template(blob_pair)
    with pytest.raises(ConfigError, match="expected 2"):
        sweep(blob_pair["spec"], template, [(0.2, 0.3, 0.5)], task_b.val)
    with pytest.raises(ConfigError, match="selection metric"):
        sweep(blob_pair["spec"], template, lambda_grid(2, 3), task_b.val, selection_metric="loss")
    with pytest.raises(ConfigError, match="empty"):
        sweep(blob_pair["spec"], template, [], task_b.val)


@pytest.fixture(scope="module")
def curve(blob_pair):
    (task_a, task_b), (ma, mb) = blob_pair["tasks"], blob_pair["models"]
    results = interpolation_curve(
        blob_pair["spec"], ma, mb, task_b.test, task_a.test, fishers=blob_pair["fishers"], step=0.1
    )
    return results


def test_curve_endpoints_are_the_unmerged_models(blob_pair, curve):
    spec = blob_pair["spec"]
    (task_a, task_b), (ma, mb) = blob_pair["tasks"], blob_pair["models"]
    for mode in ("isotropic", "fisher"):
        points = curve[mode].points
        assert len(points) == 11
        start, end = points[0], points[-1]
        assert start.target_index == 1 and end.target_index == 0
        assert start.metrics["iid_accuracy"] == evaluate_metrics(spec, mb, task_b.test)["accuracy"]
        assert start.metrics["ood_accuracy"] == evaluate_metrics(spec, mb, task_a.test)["accuracy"]
        assert end.metrics["iid_accuracy"] == evaluate_metrics(spec, ma, task_b.test)["accuracy"]
        assert end.metrics["ood_accuracy"] == evaluate_metrics(spec, ma, task_a.test)["accuracy"]
        assert points[5].target_index == 1


def test_curve_rows_are_wide(curve):
    rows = curve_rows(curve)
    assert len(rows) == 11
    assert rows[0]["lambda_1"] == 0.0 and rows[-1]["lambda_1"] == 1.0
    assert {"isotropic_iid_accuracy", "fisher_ood_accuracy", "fisher_iid_mean_log_likelihood"} <= set(rows[0])
    assert curve_rows({}) == []


def test_fisher_curve_needs_fishers(blob_pair):
    (task_a, task_b), (ma, mb) = blob_pair["tasks"], blob_pair["models"]
    with pytest.raises(ConfigError, match="Fisher"):
        interpolation_curve(blob_pair["spec"], ma, mb, task_b.test, task_a.test, step=0.5)
    iso = interpolation_curve(
        blob_pair["spec"], ma, mb, task_b.test, task_a.test, step=0.5, modes=("isotropic",)
    )
    assert list(iso) == ["isotropic"] and len(iso["isotropic"].points) == 3
