"""Global minimum variance portfolios and a static out-of-sample backtest."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from ._parallel import map_tasks
from .estimator import EstimatorConfig, fit_sparse
from .losses import LossKind, SingularModelError
from .model import DataSet, assemble_sigma, sample_covariance
from .penalties import Family
from .selection import CvMode, CvPlan, run_cv

logger = logging.getLogger(__name__)

TRADING_DAYS = 252

# label -> (loss, penalty family); None marks the non-factor strategies
ESTIMATORS = {
    "sample": None,
    "equal": None,
    "gfm_scad": (LossKind.GAUSSIAN, Family.SCAD),
    "gfm_mcp": (LossKind.GAUSSIAN, Family.MCP),
    "lsfm_scad": (LossKind.LEAST_SQUARES, Family.SCAD),
    "lsfm_mcp": (LossKind.LEAST_SQUARES, Family.MCP),
}


def gmvp_weights(sigma) -> np.ndarray:
    """``Sigma^{-1} 1 / (1^T Sigma^{-1} 1)``; raises on a singular Sigma."""
    sigma = np.asarray(sigma, dtype=float)
    try:
        cf = linalg.cho_factor(sigma, lower=True)
    except linalg.LinAlgError as exc:
        raise SingularModelError("covariance matrix is not positive definite") from exc
    x = linalg.cho_solve(cf, np.ones(sigma.shape[0]))
    return x / x.sum()


def log_returns(prices) -> np.ndarray:
    """Percentage log returns ``100 log(P_t / P_{t-1})``, one row fewer than ``prices``."""
    prices = np.asarray(prices, dtype=float)
    if prices.ndim == 1:
        prices = prices[:, None]
    if np.any(prices <= 0):
        raise ValueError("prices must be strictly positive")
    return 100.0 * np.diff(np.log(prices), axis=0)


def performance(portfolio_returns):
    """Annualised (AVG, SD, IR); IR is None when SD is zero."""
    r = np.asarray(portfolio_returns, dtype=float)
    avg = float(r.mean() * TRADING_DAYS)
    sd = float(r.std(ddof=1) * math.sqrt(TRADING_DAYS))
    ir = avg / sd if sd > 0 else None
    return avg, sd, ir


@dataclass
class BacktestReport:
    estimator_label: str
    avg: float | None = None
    sd: float | None = None
    ir: float | None = None
    weights: np.ndarray | None = None
    gamma: float | None = None
    error: str = ""

    def to_dict(self) -> dict:
        return {
            "label": self.estimator_label,
            "avg": self.avg,
            "sd": self.sd,
            "ir": self.ir,
            "gamma": self.gamma,
            "weights": None if self.weights is None else [float(w) for w in self.weights],
            "error": self.error or None,
        }


def _in_sample_sigma(label, in_sample, m, config, plan, gamma):
    spec = ESTIMATORS[label]
    if label == "sample":
        return sample_covariance(in_sample), None
    loss, family = spec
    penalty = config.penalty
    cfg = config.replace(loss=loss, jitter=True,
                         penalty=type(penalty)(family, penalty.gamma))
    if gamma is None:
        gamma = run_cv(in_sample, m, cfg, plan).gamma_star
    fit = fit_sparse(in_sample, m, cfg.with_gamma(gamma))
    return assemble_sigma(fit.params), gamma


def backtest(returns: DataSet, split_index: int, m: int,
             estimators=tuple(ESTIMATORS), config: EstimatorConfig | None = None,
             plan: CvPlan | None = None, gamma: float | None = None,
             threads: int = 1) -> list[BacktestReport]:
    """Fit each estimator on rows ``[:split_index]`` and evaluate on the rest.

    In-sample returns are de-meaned before covariance estimation; the
    out-of-sample portfolio return ``w^T r_t`` uses the raw returns. The
    regularisation level of the factor fits is chosen by ``plan`` on the
    in-sample block unless ``gamma`` is given. Failures are reported per
    label and do not stop the other estimators.
    """
    config = config or EstimatorConfig()
    plan = plan or CvPlan(mode=CvMode.TIMESPLIT)
    x = returns.observations
    n, p = x.shape
    unknown = [e for e in estimators if e not in ESTIMATORS]
    if unknown:
        raise ValueError(f"unknown estimators: {', '.join(unknown)}")
    if not 2 <= split_index <= n - 2:
        raise ValueError("split must leave >= 2 in-sample and >= 2 out-of-sample rows")
    in_sample = DataSet(x[:split_index], centered=False, columns=returns.columns)
    out_sample = x[split_index:]

    def run(label):
        report = BacktestReport(label)
        try:
            if label == "equal":
                weights = np.full(p, 1.0 / p)
            else:
                sigma, report.gamma = _in_sample_sigma(label, in_sample, m, config, plan, gamma)
                weights = gmvp_weights(sigma)
        except (ArithmeticError, RuntimeError, ValueError, np.linalg.LinAlgError) as exc:
            logger.warning("estimator %s failed: %s", label, exc)
            report.error = f"{type(exc).__name__}: {exc}"
            return report
        report.weights = weights
        report.avg, report.sd, report.ir = performance(out_sample @ weights)
        return report

    return map_tasks(run, list(estimators), threads)
