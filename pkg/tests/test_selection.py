import json
import math

import numpy as np
import pytest

from sparse_factor.estimator import EstimatorConfig, fit_sparse
from sparse_factor.model import DataSet
from sparse_factor.selection import (DEFAULT_C_GRID, CvMode, CvPlan, cv_kfold, cv_timesplit,
                                     fold_indices, gamma_grid, run_cv, select_gamma)
from sparse_factor.simulation import SimDesign, generate_model, recovery_metrics, sample_data

SMALL_GRID = (0.5, 1.5, 3.0)


@pytest.fixture(scope="module")
def sparse_data():
    truth = generate_model(SimDesign("i", 20, 2, 800, seed=2))
    return truth, sample_data(truth, 800, 5)


def test_default_grid():
    assert len(DEFAULT_C_GRID) == 41
    assert DEFAULT_C_GRID[:3] == (0.01, 0.1, 0.2) and DEFAULT_C_GRID[-1] == 4.0


def test_gamma_grid_scaling():
    scale = math.sqrt(math.log(180) / 1000)
    assert scale == pytest.approx(0.0720622, abs=1e-7)
    grid = gamma_grid(CvPlan(), 1000, 60, 3)
    assert len(grid) == 41
    np.testing.assert_allclose(grid, np.array(DEFAULT_C_GRID) * scale, rtol=1e-15)
    assert np.all(np.diff(grid) > 0)
    one = gamma_grid(CvPlan(c_grid=(1.0,)), 50, 4, 2)
    assert one.tolist() == [math.sqrt(math.log(8) / 50)]
    with pytest.raises(ValueError):
        gamma_grid(CvPlan(), 100, 1, 1)


@pytest.mark.parametrize("kwargs", [dict(folds=1), dict(train_fraction=1.0),
                                    dict(train_fraction=0.0), dict(c_grid=()),
                                    dict(c_grid=(1.0, 0.5)), dict(c_grid=(0.0, 1.0))])
def test_plan_validation(kwargs):
    with pytest.raises(ValueError):
        CvPlan(**kwargs)


def test_fold_indices():
    folds = fold_indices(23, 5, seed=4)
    assert [len(f) for f in folds] == [5, 5, 5, 4, 4]
    np.testing.assert_array_equal(np.sort(np.concatenate(folds)), np.arange(23))
    again = fold_indices(23, 5, seed=4)
    assert all(np.array_equal(a, b) for a, b in zip(folds, again))
    assert not all(np.array_equal(a, b) for a, b in zip(folds, fold_indices(23, 5, seed=5)))
    with pytest.raises(ValueError):
        fold_indices(3, 5, 0)


def test_select_gamma_ties_go_to_largest():
    assert select_gamma([0.1, 0.2, 0.3], [1.0, 1.0, 2.0]) == 0.2
    assert select_gamma([0.1, 0.2, 0.3], [np.inf, 3.0, np.inf]) == 0.2
    with pytest.raises(RuntimeError):
        select_gamma([0.1], [np.inf])


def test_single_candidate_grid(sparse_data):
    _, data = sparse_data
    plan = CvPlan(c_grid=(2.0,))
    gamma, scores = cv_kfold(data, 2, EstimatorConfig(), plan)
    assert gamma == gamma_grid(plan, data.n, data.p, 2)[0]
    assert scores.shape == (1,) and np.isfinite(scores[0])


def test_kfold_selection_beats_unpenalised_support(sparse_data):
    truth, data = sparse_data
    plan = CvPlan(c_grid=SMALL_GRID, seed=1)
    gamma, scores = cv_kfold(data, 2, EstimatorConfig(), plan)
    assert scores.shape == (3,) and np.all(np.isfinite(scores) | np.isposinf(scores))
    c1_sel, _, _ = recovery_metrics(fit_sparse(data, 2, EstimatorConfig().with_gamma(gamma)).lam,
                                    truth)
    c1_zero, _, _ = recovery_metrics(fit_sparse(data, 2, EstimatorConfig()).lam, truth)
    assert c1_sel >= c1_zero


def test_cv_reproducible_and_thread_independent(sparse_data):
    _, data = sparse_data
    plan = CvPlan(c_grid=SMALL_GRID, seed=3)
    a = run_cv(data, 2, EstimatorConfig(), plan)
    b = run_cv(data, 2, EstimatorConfig(), plan, threads=3)
    np.testing.assert_array_equal(a.scores, b.scores)
    payload = json.loads(json.dumps(a.to_dict()))
    assert payload["fold_sizes"] == [160] * 5 and payload["seed"] == 3
    assert payload["gamma_star"] == a.gamma_star


def test_timesplit(sparse_data):
    _, data = sparse_data
    plan = CvPlan(mode="timesplit", c_grid=SMALL_GRID)
    assert CvPlan().train_fraction == 0.75
    report = run_cv(data, 2, EstimatorConfig(), plan)
    assert report.fold_sizes == [600, 200]
    gamma, scores = cv_timesplit(data, 2, EstimatorConfig(), CvPlan(c_grid=SMALL_GRID))
    np.testing.assert_array_equal(scores, report.scores)
    order = np.random.default_rng(0).permutation(data.n)
    shuffled = DataSet(data.observations[order], centered=True)
    _, other = cv_timesplit(shuffled, 2, EstimatorConfig(), plan)
    assert not np.array_equal(other, scores)
    # k-fold scores do not depend on the row order beyond the fold draw
    assert report.mode is CvMode.TIMESPLIT


def test_constant_rows_tie_to_largest_gamma():
    data = DataSet(np.tile([1.0, -2.0, 0.5, 3.0], (40, 1)))
    plan = CvPlan(mode="timesplit", c_grid=(0.5, 1.0, 2.0))
    gamma, scores = cv_timesplit(data, 1, EstimatorConfig(loss="ls"), plan)
    assert np.ptp(scores) <= 1e-10
    assert gamma == gamma_grid(plan, 40, 4, 1)[-1]


def test_all_failures_raise():
    rng = np.random.default_rng(0)
    data = DataSet(rng.standard_normal((12, 10)))  # training blocks are singular
    with pytest.raises(RuntimeError):
        cv_kfold(data, 2, EstimatorConfig(), CvPlan(c_grid=(1.0,)))
