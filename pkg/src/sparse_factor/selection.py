"""Regularisation grids and cross-validated choice of ``gamma``."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from ._parallel import map_tasks
from .estimator import EstimatorConfig, fit_ic5, fit_sparse
from .losses import loss_value
from .model import DataSet, sample_covariance, second_moment

logger = logging.getLogger(__name__)

DEFAULT_C_GRID = (0.01,) + tuple(round(0.1 * k, 10) for k in range(1, 41))


class CvMode(str, Enum):
    KFOLD = "kfold"
    TIMESPLIT = "timesplit"


@dataclass(frozen=True)
class CvPlan:
    """How to split the rows and which multipliers ``c`` to try."""

    mode: CvMode = CvMode.KFOLD
    folds: int = 5
    train_fraction: float = 0.75
    c_grid: tuple = DEFAULT_C_GRID
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "mode", CvMode(self.mode))
        grid = tuple(float(c) for c in self.c_grid)
        object.__setattr__(self, "c_grid", grid)
        if not grid:
            raise ValueError("c_grid must not be empty")
        if any(c <= 0 for c in grid) or any(b <= a for a, b in zip(grid, grid[1:])):
            raise ValueError("c_grid must be positive and strictly increasing")
        if self.folds < 2:
            raise ValueError("folds must be >= 2")
        if not 0 < self.train_fraction < 1:
            raise ValueError("train_fraction must lie in (0, 1)")


@dataclass
class CvReport:
    grid: np.ndarray
    scores: np.ndarray
    gamma_star: float
    fold_sizes: list
    seed: int
    mode: CvMode
    failures: int = 0
    c_grid: tuple = field(default=())

    def to_dict(self) -> dict:
        return {
            "mode": self.mode.value,
            "seed": int(self.seed),
            "c_grid": list(self.c_grid),
            "grid": [float(g) for g in self.grid],
            "scores": [float(s) if np.isfinite(s) else None for s in self.scores],
            "gamma_star": float(self.gamma_star),
            "fold_sizes": [int(k) for k in self.fold_sizes],
            "failures": int(self.failures),
        }


def gamma_grid(plan: CvPlan, n: int, p: int, m: int) -> np.ndarray:
    """``c * sqrt(log(p m) / n)`` for every ``c`` in the plan, ascending."""
    if n < 2:
        raise ValueError("need n >= 2")
    if p * m < 2:
        raise ValueError("need p * m >= 2 so that log(p m) > 0")
    return np.asarray(plan.c_grid) * np.sqrt(np.log(p * m) / n)


def fold_indices(n: int, folds: int, seed: int) -> list[np.ndarray]:
    """Random disjoint folds covering ``range(n)``.

    Sizes differ by at most one; the first ``n % folds`` folds get the
    extra row. The assignment depends only on ``(seed, n, folds)``.
    """
    if n < folds:
        raise ValueError(f"need at least {folds} rows, got {n}")
    order = np.random.default_rng(seed).permutation(n)
    base, extra = divmod(n, folds)
    sizes = [base + (k < extra) for k in range(folds)]
    bounds = np.cumsum([0] + sizes)
    return [np.sort(order[bounds[k]:bounds[k + 1]]) for k in range(folds)]


def _test_moment(data: DataSet, train_rows, test_rows):
    x = data.observations
    test = x[test_rows]
    if not data.centered:
        test = test - x[train_rows].mean(axis=0)
    return second_moment(test)


def select_gamma(grid, scores) -> float:
    """Grid minimiser; near-ties (within 1e-10) go to the largest gamma."""
    scores = np.asarray(scores, dtype=float)
    finite = np.isfinite(scores)
    if not finite.any():
        raise RuntimeError("every grid point failed during cross-validation")
    best = scores[finite].min()
    tied = finite & (scores <= best + 1e-10 * max(1.0, abs(best)))
    return float(np.asarray(grid)[np.flatnonzero(tied)[-1]])


def _split_scores(data, m, config, grid, splits, threads):
    """Sum over splits of the held-out unpenalised loss, per grid point."""
    kind = config.loss
    prepared = []
    for train, test in splits:
        s_train = sample_covariance(data.subset(train))
        try:
            ic5 = fit_ic5(s_train, m, kind, config)
        except (ArithmeticError, RuntimeError, ValueError, np.linalg.LinAlgError) as exc:
            logger.warning("initial fit failed on a split: %s", exc)
            ic5 = None
        prepared.append((s_train, _test_moment(data, train, test), ic5))

    def task(item):
        j, k = item
        s_train, s_test, ic5 = prepared[k]
        if ic5 is None:
            return np.inf
        try:
            fit = fit_sparse(s_train, m, config.with_gamma(grid[j]), ic5=ic5)
            return loss_value(kind, s_test, fit.params)
        except (ArithmeticError, RuntimeError, ValueError, np.linalg.LinAlgError) as exc:
            logger.warning("fit failed at gamma=%g: %s", grid[j], exc)
            return np.inf

    items = [(j, k) for j in range(len(grid)) for k in range(len(splits))]
    values = np.array(map_tasks(task, items, threads)).reshape(len(grid), len(splits))
    return values.sum(axis=1)


def run_cv(data: DataSet, m: int, config: EstimatorConfig, plan: CvPlan,
           threads: int = 1) -> CvReport:
    """Cross-validate ``gamma`` according to ``plan.mode``."""
    n = data.n
    if plan.mode is CvMode.KFOLD:
        folds = fold_indices(n, plan.folds, plan.seed)
        all_rows = np.arange(n)
        splits = [(np.setdiff1d(all_rows, f), f) for f in folds]
        fold_sizes = [len(f) for f in folds]
    else:
        n_train = int(np.floor(plan.train_fraction * n))
        if n_train < 2 or n - n_train < 1:
            raise ValueError("time split leaves an empty training or test block")
        splits = [(np.arange(n_train), np.arange(n_train, n))]
        fold_sizes = [n_train, n - n_train]
    grid = gamma_grid(plan, n, data.p, m)
    scores = _split_scores(data, m, config, grid, splits, threads)
    gamma_star = select_gamma(grid, scores)
    return CvReport(grid, scores, gamma_star, fold_sizes, plan.seed, plan.mode,
                    int(np.sum(~np.isfinite(scores))), plan.c_grid)


def cv_kfold(data: DataSet, m: int, config: EstimatorConfig, plan: CvPlan,
             threads: int = 1):
    """k-fold CV; returns ``(gamma_star, scores)``."""
    if plan.mode is not CvMode.KFOLD:
        plan = CvPlan(CvMode.KFOLD, plan.folds, plan.train_fraction, plan.c_grid, plan.seed)
    report = run_cv(data, m, config, plan, threads)
    return report.gamma_star, report.scores


def cv_timesplit(data: DataSet, m: int, config: EstimatorConfig, plan: CvPlan,
                 threads: int = 1):
    """Leading-block fit, trailing-block score; returns ``(gamma_star, scores)``."""
    if plan.mode is not CvMode.TIMESPLIT:
        plan = CvPlan(CvMode.TIMESPLIT, plan.folds, plan.train_fraction, plan.c_grid,
                      plan.seed)
    report = run_cv(data, m, config, plan, threads)
    return report.gamma_star, report.scores
