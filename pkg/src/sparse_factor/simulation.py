"""Synthetic sparse factor models, Gaussian sampling and recovery metrics."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy.optimize import linear_sum_assignment

from ._parallel import map_tasks
from .estimator import EstimatorConfig, fit_sparse
from .model import DataSet, FactorParams
from .selection import CvPlan, run_cv

logger = logging.getLogger(__name__)


class Pattern(str, Enum):
    PERFECT_SIMPLE = "i"
    PERFECT_SIMPLE_OVERLAP = "ii"
    PERFECT_SIMPLE_OVERLAP_SPARSE = "iii"
    ARBITRARY = "iv"


@dataclass(frozen=True)
class SimDesign:
    pattern: Pattern
    p: int
    m: int
    n: int
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "pattern", Pattern(self.pattern))
        if not 1 <= self.m <= self.p:
            raise ValueError(f"need 1 <= m <= p, got p={self.p}, m={self.m}")
        if self.n < 2:
            raise ValueError("need n >= 2")

    def with_seed(self, seed) -> SimDesign:
        return SimDesign(self.pattern, self.p, self.m, self.n, seed)


@dataclass(frozen=True)
class GroundTruth:
    params: FactorParams
    support: np.ndarray

    @property
    def s(self) -> int:
        return int(self.support.sum())


def _block_bounds(p, m):
    size = p // m
    starts = [k * size for k in range(m)]
    ends = starts[1:] + [p]
    return list(zip(starts, ends))


def overlap_size(p: int, m: int) -> int:
    return math.ceil(0.5 * p / m)


def pattern_support(pattern: Pattern, p: int, m: int, rng=None) -> np.ndarray:
    """Boolean p x m support of the requested pattern.

    Patterns (i) and (ii) are fixed functions of ``(p, m)``; patterns (iii)
    and (iv) draw their locations from ``rng``.
    """
    pattern = Pattern(pattern)
    support = np.zeros((p, m), dtype=bool)
    blocks = _block_bounds(p, m)
    if pattern is Pattern.ARBITRARY:
        s = round(0.15 * p * m)
        chosen = rng.choice(p * m, size=s, replace=False)
        support.ravel()[chosen] = True
        return support
    for k, (lo, hi) in enumerate(blocks):
        support[lo:hi, k] = True
    if pattern is Pattern.PERFECT_SIMPLE:
        return support
    width = overlap_size(p, m)
    if width > p // m:
        raise ValueError(
            f"overlap of {width} rows exceeds the block size {p // m} for p={p}, m={m}")
    for k, (lo, hi) in enumerate(blocks[:-1]):
        support[hi - width:hi, k + 1] = True
    if pattern is Pattern.PERFECT_SIMPLE_OVERLAP:
        return support
    target = round(0.3 * p * m)
    current = np.flatnonzero(support.ravel())
    if target > current.size:
        raise ValueError(
            f"pattern iii needs {target} nonzeros but the overlap support has {current.size}")
    keep = rng.choice(current, size=target, replace=False)
    support[:] = False
    support.ravel()[keep] = True
    return support


def generate_model(design: SimDesign) -> GroundTruth:
    """Draw (lam*, psi*) for the design's pattern and seed."""
    rng = np.random.default_rng([design.seed, 0])
    support = pattern_support(design.pattern, design.p, design.m, rng)
    magnitude = rng.uniform(0.5, 2.0, size=support.shape)
    sign = np.where(rng.random(size=support.shape) < 0.5, -1.0, 1.0)
    lam = np.where(support, sign * magnitude, 0.0)
    psi = rng.uniform(0.5, 1.0, size=design.p)
    return GroundTruth(FactorParams(lam, psi), support)


def sample_data(truth: GroundTruth, n: int, seed) -> DataSet:
    """n i.i.d. rows ``x = lam f + e`` with ``f ~ N(0, I)`` and ``e ~ N(0, diag psi)``."""
    if n < 1:
        raise ValueError("need n >= 1")
    rng = np.random.default_rng(seed)
    lam, psi = truth.params.lam, truth.params.psi
    factors = rng.standard_normal((n, lam.shape[1]))
    noise = rng.standard_normal((n, lam.shape[0])) * np.sqrt(psi)
    return DataSet(factors @ lam.T + noise, centered=True)


# --------------------------------------------------------------------------
# metrics


def align_rotation(lambda_hat, lambda_star) -> np.ndarray:
    """Orthogonal R minimising ``||lambda_hat - lambda_star R||_F``."""
    lh = np.asarray(lambda_hat, dtype=float)
    ls = np.asarray(lambda_star, dtype=float)
    for mat in (lh, ls):
        sv = np.linalg.svd(mat, compute_uv=False)
        if sv[-1] <= 1e-10 * max(sv[0], np.finfo(float).tiny):
            raise ValueError("alignment needs full column rank loadings")
    u, _, vt = np.linalg.svd(ls.T @ lh)
    return u @ vt


def align_columns(lambda_hat, lambda_star) -> np.ndarray:
    """Permute and flip the columns of ``lambda_hat`` to best match ``lambda_star``.

    The loss is invariant to signed column permutations, so estimates are
    only defined up to one. The matching minimises the squared error
    column by column (assignment problem).
    """
    lh = np.asarray(lambda_hat, dtype=float)
    ls = np.asarray(lambda_star, dtype=float)
    plus = ((lh[:, :, None] - ls[:, None, :]) ** 2).sum(axis=0)
    minus = ((lh[:, :, None] + ls[:, None, :]) ** 2).sum(axis=0)
    rows, cols = linear_sum_assignment(np.minimum(plus, minus))
    out = np.empty_like(lh)
    for j, k in zip(rows, cols):
        out[:, k] = lh[:, j] if plus[j, k] <= minus[j, k] else -lh[:, j]
    return out


def recovery_metrics(lambda_hat, truth: GroundTruth, zero_tol: float = 1e-6,
                     align: bool = True):
    """Return ``(c1, c2, mse)``.

    c1 is the percentage of true zeros estimated as zero, c2 the percentage
    of true nonzeros estimated as nonzero (both 100 when the set is empty),
    and mse the squared Frobenius error. With ``align`` the columns of
    ``lambda_hat`` are first matched to the truth up to sign and order.
    """
    lam_star = truth.params.lam
    lh = np.asarray(lambda_hat, dtype=float)
    if lh.shape != lam_star.shape:
        raise ValueError("lambda_hat and truth have different shapes")
    if align:
        lh = align_columns(lh, lam_star)
    zero_hat = np.abs(lh) <= zero_tol
    true_zero = ~truth.support
    c1 = 100.0 * zero_hat[true_zero].mean() if true_zero.any() else 100.0
    c2 = 100.0 * (~zero_hat[truth.support]).mean() if truth.support.any() else 100.0
    mse = float(np.sum((lh - lam_star) ** 2))
    return float(c1), float(c2), mse


# --------------------------------------------------------------------------
# batches


@dataclass
class RepRecord:
    rep: int
    seed: int
    c1: float = math.nan
    c2: float = math.nan
    mse: float = math.nan
    converged: bool = False
    iterations: int = 0
    gamma_star: float = math.nan
    error: str = ""

    @property
    def ok(self) -> bool:
        return not self.error


@dataclass
class BatchSummary:
    design: SimDesign
    records: list

    @property
    def successes(self) -> list:
        return [r for r in self.records if r.ok]

    @property
    def failures(self) -> int:
        return len(self.records) - len(self.successes)

    def mean(self, name: str) -> float:
        values = [getattr(r, name) for r in self.successes]
        return float(np.mean(values)) if values else math.nan

    def to_dict(self) -> dict:
        return {
            "pattern": self.design.pattern.value,
            "p": self.design.p, "m": self.design.m, "n": self.design.n,
            "seed": self.design.seed,
            "reps": len(self.records),
            "failures": self.failures,
            "mean_c1": self.mean("c1"),
            "mean_c2": self.mean("c2"),
            "mean_mse": self.mean("mse"),
            "mean_gamma_star": self.mean("gamma_star"),
        }


def rep_seed(seed: int, rep: int) -> int:
    return int(np.random.SeedSequence([seed, rep]).generate_state(1)[0])


def run_replication(design: SimDesign, rep: int, config: EstimatorConfig,
                    plan: CvPlan, gamma: float | None = None) -> RepRecord:
    """generate -> sample -> (CV) -> fit -> metrics for one replication.

    With ``gamma`` given, cross-validation is skipped.
    """
    seed = rep_seed(design.seed, rep)
    record = RepRecord(rep, seed)
    try:
        truth = generate_model(design.with_seed(seed))
        data = sample_data(truth, design.n, [seed, 1])
        if gamma is None:
            gamma = run_cv(data, design.m, config, plan).gamma_star
        fit = fit_sparse(data, design.m, config.with_gamma(gamma))
        record.c1, record.c2, record.mse = recovery_metrics(fit.lam, truth, config.zero_tol)
        record.converged, record.iterations = fit.converged, fit.iterations
        record.gamma_star = float(gamma)
    except (ArithmeticError, RuntimeError, ValueError, np.linalg.LinAlgError) as exc:
        logger.warning("replication %d failed: %s", rep, exc)
        record.error = f"{type(exc).__name__}: {exc}"
    return record


def run_batch(design: SimDesign, reps: int, config: EstimatorConfig, plan: CvPlan,
              threads: int = 1, gamma: float | None = None) -> BatchSummary:
    if reps < 1:
        raise ValueError("reps must be >= 1")
    records = map_tasks(lambda r: run_replication(design, r, config, plan, gamma),
                        range(reps), threads)
    return BatchSummary(design, records)
