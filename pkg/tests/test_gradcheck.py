import csv

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from litemeta.gradcheck import (
    REPORT_HEADER,
    GradExperimentConfig,
    GradReport,
    check_model,
    check_primitives,
    emit_report,
    exact_gradient,
    fd_models,
    finite_difference_gradient,
    read_report,
    relative_error,
    run_bias_variance_experiment,
    setup_experiment,
)

TINY = GradExperimentConfig(
    way=3, shot=2, query_per_class=2, image_shape=(1, 5, 5), extractor_widths=(4, 4),
    encoder_width=4, embed_dim=4, H_values=(3, 6), total_examples_per_H=12,
)


def test_every_primitive_matches_finite_differences():
    results = check_primitives(seed=0)
    from litemeta.autodiff import _OPS

    assert {r.target for r in results} == set(_OPS)
    bad = [r for r in results if not r.passed(1e-4)]
    assert not bad


def test_protonets_graph_matches_finite_differences():
    model, params, episode = fd_models()[0]
    assert all(r.passed(1e-4) for r in check_model(model, params, episode))


def test_relative_error_floor():
    assert relative_error(np.zeros(3), np.full(3, 1e-12)) == pytest.approx(1e-4)
    assert relative_error(np.array([2.0]), np.array([1.0])) == pytest.approx(0.5)


@given(st.floats(-3, 3), st.floats(-3, 3))
def test_finite_differences_of_quadratic_are_exact(a, c):
    from litemeta.params import InitSpec, ParamStore

    store = ParamStore()
    store.add("p", np.array([a, c]), InitSpec("zeros"))
    fd = finite_difference_gradient(lambda: float(np.sum(store["p"].data ** 2)), store, "p", 1e-4)
    np.testing.assert_allclose(fd, [2 * a, 2 * c], atol=1e-8)


def test_exact_gradient_is_deterministic():
    a = setup_experiment(TINY)
    b = setup_experiment(TINY)
    assert np.array_equal(a.exact, b.exact)
    again = exact_gradient(a.model, a.params, a.episode, TINY.param_name)
    assert np.array_equal(again, a.exact)


def test_experiment_rows_and_run_counts():
    rep = run_bias_variance_experiment(TINY, "lite")
    assert rep.H == [3, 6]
    assert rep.num_runs == [4, 2]
    # H = N back-propagates every example, so every run is exact
    assert rep.bias_mse[1] < 1e-24 and rep.avg_rmse[1] < 1e-12
    assert rep.avg_rmse[0] > 0


def test_subsampled_arm_needs_a_row_per_class():
    cfg = GradExperimentConfig(**{**TINY.__dict__, "H_values": (2,)})
    with pytest.raises(ValueError):
        run_bias_variance_experiment(cfg, "subsampled")
    with pytest.raises(ValueError):
        run_bias_variance_experiment(TINY, "neither")


def test_threaded_experiment_matches_serial():
    setup = setup_experiment(TINY)
    a = run_bias_variance_experiment(TINY, "subsampled", setup)
    b = run_bias_variance_experiment(TINY, "subsampled", setup, workers=2)
    assert a == b


def test_report_csv_round_trip(tmp_path):
    rep = run_bias_variance_experiment(TINY, "subsampled")
    path = tmp_path / "r.csv"
    emit_report(rep, path)
    with open(path) as f:
        assert next(csv.reader(f)) == REPORT_HEADER
    rows = read_report(path)
    assert len(rows) == len(TINY.H_values)
    for i, row in enumerate(rows):
        assert row["H"] == rep.H[i] and row["num_runs"] == rep.num_runs[i]
        assert abs(row["bias_mse"] - rep.bias_mse[i]) <= 1e-6 * max(rep.bias_mse[i], 1e-30)
        assert abs(row["avg_rmse"] - rep.avg_rmse[i]) <= 1e-6 * rep.avg_rmse[i]


def test_report_rejects_non_finite(tmp_path):
    rep = GradReport("lite", "stratified", [10], [100], [float("nan")], [1.0])
    with pytest.raises(ValueError):
        emit_report(rep, tmp_path / "r.csv")
