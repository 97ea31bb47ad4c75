"""Penalised sparse factor estimation by alternating L-, Q- and Psi-steps.

The loadings are written ``lam = L @ Q.T`` with ``Q`` orthogonal. Starting
from a lower-trapezoidal (IC5) fit of the unpenalised loss and a rotation
that minimises the penalty, the estimator repeats

* L-step: proximal gradient descent on ``loss(lam, psi) + penalty(lam)``,
* Q-step: penalty-only descent over the orthogonal group (the loss is
  unchanged because ``lam lam^T`` is rotation invariant),
* Psi-step: minimisation of the loss over the diagonal variances,

until the penalised objective stabilises. Every step is monotone.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import optimize

from .losses import (LossKind, SingularModelError, loss_and_gradient,
                     loss_hessian, loss_value)
from .model import DataSet, FactorParams, sample_covariance
from .penalties import PenaltySpec, penalty_subgradient, prox, total_penalty

logger = logging.getLogger(__name__)


class ConvergenceError(RuntimeError):
    """Raised when the IC5 fit fails; ``best`` holds the last iterate."""

    def __init__(self, message, best=None):
        super().__init__(message)
        self.best = best


@dataclass(frozen=True)
class EstimatorConfig:
    loss: LossKind = LossKind.GAUSSIAN
    penalty: PenaltySpec = field(default_factory=PenaltySpec)
    grid_size_k: int = 20
    max_outer_iters: int = 500
    rel_tol: float = 1e-6
    psi_min: float = 1e-6
    zero_tol: float = 1e-6
    seed: int = 0
    skip_psi_step: bool = False
    jitter: bool = False
    max_inner_iters: int = 500
    inner_tol: float = 1e-10
    q_restarts: int = 5

    def __post_init__(self):
        object.__setattr__(self, "loss", LossKind(self.loss))
        if not self.rel_tol > 0:
            raise ValueError("rel_tol must be positive")
        if not self.psi_min > 0:
            raise ValueError("psi_min must be positive")
        if not self.zero_tol >= 0:
            raise ValueError("zero_tol must be non-negative")
        if self.grid_size_k < 1:
            raise ValueError("grid_size_k must be >= 1")

    def with_gamma(self, gamma: float) -> EstimatorConfig:
        return self.replace(penalty=self.penalty.with_gamma(gamma))

    def replace(self, **changes) -> EstimatorConfig:
        values = {f: getattr(self, f) for f in self.__dataclass_fields__}
        values.update(changes)
        return EstimatorConfig(**values)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["loss"] = self.loss.value
        out["penalty"] = {"family": self.penalty.family.value,
                          "shape": self.penalty.shape,
                          "gamma": self.penalty.gamma}
        return out


@dataclass
class FitResult:
    params: FactorParams
    q_hat: np.ndarray
    objective_trace: list
    support: np.ndarray
    converged: bool
    iterations: int
    config: EstimatorConfig | None = None
    # (step label, penalised objective) after every L/Q/Psi step
    step_log: list = field(default_factory=list, repr=False)
    # (lam lam^T before, after) Frobenius change at every Q-step
    q_step_drift: list = field(default_factory=list, repr=False)

    @property
    def lam(self) -> np.ndarray:
        return self.params.lam

    @property
    def psi(self) -> np.ndarray:
        return self.params.psi

    def to_dict(self) -> dict:
        return {
            "lambda": self.params.lam.tolist(),
            "psi": self.params.psi.tolist(),
            "q_hat": self.q_hat.tolist(),
            "support": self.support.astype(bool).tolist(),
            "objective_trace": [float(v) for v in self.objective_trace],
            "converged": bool(self.converged),
            "iterations": int(self.iterations),
            "config": self.config.to_dict() if self.config else None,
        }


def penalized_objective(kind, s_hat, lam, psi, penalty: PenaltySpec) -> float:
    return loss_value(kind, s_hat, FactorParams(lam, psi)) + total_penalty(penalty, lam)


def _check_s_hat(s_hat, kind, config):
    s_hat = np.asarray(s_hat, dtype=float)
    if s_hat.ndim != 2 or s_hat.shape[0] != s_hat.shape[1]:
        raise ValueError("s_hat must be a square matrix")
    s_hat = 0.5 * (s_hat + s_hat.T)
    if LossKind(kind) is LossKind.GAUSSIAN:
        p = s_hat.shape[0]
        smallest = np.linalg.eigvalsh(s_hat)[0]
        scale = max(np.trace(s_hat) / p, np.finfo(float).tiny)
        if smallest <= 1e-12 * scale:
            if not config.jitter:
                raise SingularModelError(
                    "sample covariance is singular; enable jitter for the Gaussian loss")
            s_hat = s_hat + 1e-8 * scale * np.eye(p)
    return s_hat


def _orthonormal_from(a):
    q, r = np.linalg.qr(a)
    return q * np.where(np.diag(r) < 0, -1.0, 1.0)


def _polar(a):
    u, _, vt = np.linalg.svd(a)
    return u @ vt


def random_orthogonal(m: int, rng) -> np.ndarray:
    """QR-orthogonalised draw with entries uniform on [-2, 2]."""
    return _orthonormal_from(rng.uniform(-2.0, 2.0, size=(m, m)))


# --------------------------------------------------------------------------
# rotation extraction


def extract_rotation(lambda_hat, rank_tol: float = 1e-10):
    """Factor ``lambda_hat = L @ Q`` with L lower trapezoidal and Q orthogonal.

    The diagonal of the top m x m block of L is made non-negative. Raises
    ``ValueError`` when ``lambda_hat`` does not have full column rank.
    """
    lam = np.asarray(lambda_hat, dtype=float)
    p, m = lam.shape
    if m > p:
        raise ValueError("need p >= m")
    sv = np.linalg.svd(lam, compute_uv=False)
    if sv[-1] <= rank_tol * max(sv[0], np.finfo(float).tiny):
        raise ValueError("lambda_hat is rank deficient")
    return _lq(lam)


def _lq(lam):
    q_r, r_r = np.linalg.qr(lam.T)  # lam.T = q_r r_r, so lam = r_r.T q_r.T
    signs = np.where(np.diag(r_r) < 0, -1.0, 1.0)
    l_hat = r_r.T * signs
    q_hat = signs[:, None] * q_r.T
    return l_hat, q_hat


# --------------------------------------------------------------------------
# step (i): unpenalised fit in IC5 form


def _initial_guess(s_hat, m, psi_min):
    p = s_hat.shape[0]
    diag = np.clip(np.diag(s_hat), psi_min, None)
    try:
        prec_diag = np.diag(np.linalg.inv(s_hat))
        psi = np.clip((1.0 - 0.5 * m / p) / prec_diag, psi_min, None)
    except np.linalg.LinAlgError:
        psi = 0.5 * diag
    psi = np.minimum(psi, diag)
    root = np.sqrt(psi)
    scaled = s_hat / np.outer(root, root)
    vals, vecs = np.linalg.eigh(scaled)
    vals, vecs = vals[::-1][:m], vecs[:, ::-1][:, :m]
    lam = root[:, None] * vecs * np.sqrt(np.clip(vals - 1.0, 1e-4, None))
    return lam, psi


def fit_ic5(s_hat, m: int, loss: LossKind | None = None,
            config: EstimatorConfig | None = None) -> FactorParams:
    """Unpenalised fit whose loadings satisfy the lower-triangular constraint.

    The loss is invariant under ``lam -> lam Q``, so the minimum over
    IC5-shaped loadings equals the unconstrained minimum. The loss is
    minimised over all loadings with L-BFGS-B (``psi >= psi_min``) and the
    result is rotated to lower-trapezoidal form by a QR factorisation.
    """
    config = config or EstimatorConfig()
    kind = LossKind(loss or config.loss)
    s_hat = _check_s_hat(s_hat, kind, config)
    p = s_hat.shape[0]
    if not 1 <= m <= p:
        raise ValueError(f"need 1 <= m <= p, got m={m}, p={p}")
    lam0, psi0 = _initial_guess(s_hat, m, config.psi_min)
    pm = p * m
    scale = max(1.0, abs(loss_value(kind, s_hat, FactorParams(lam0, psi0))))

    def unpack(x):
        return FactorParams(x[:pm].reshape(p, m), x[pm:])

    def fun(x):
        try:
            value, grad = loss_and_gradient(kind, s_hat, unpack(x))
        except SingularModelError:
            return np.inf, np.zeros_like(x)
        return value / scale, np.concatenate([grad.grad_lam.ravel(), grad.grad_psi]) / scale

    bounds = [(None, None)] * pm + [(config.psi_min, None)] * p
    x = np.concatenate([lam0.ravel(), psi0])
    for _ in range(3):
        res = optimize.minimize(fun, x, jac=True, method="L-BFGS-B", bounds=bounds,
                                options={"maxiter": 20000, "maxcor": 30,
                                         "ftol": 1e-16, "gtol": 1e-11})
        x = res.x
        best = unpack(x)
        value, grad = loss_and_gradient(kind, s_hat, best)
        gnorm = _projected_grad_norm(grad, best.psi, config.psi_min)
        if gnorm <= 1e-5 * max(1.0, abs(value)):
            break
        x = _newton_polish(kind, s_hat, best, config.psi_min)
    else:
        raise ConvergenceError(
            f"IC5 fit did not reach stationarity (gradient norm {gnorm:.3e})", best)
    l_hat, _ = _lq(best.lam)
    return FactorParams(l_hat, best.psi)


def _projected_grad_norm(grad, psi, psi_min):
    gp = grad.grad_psi.copy()
    at_bound = (psi <= psi_min * (1 + 1e-12)) & (gp > 0)
    gp[at_bound] = 0.0
    return float(np.sqrt(np.sum(grad.grad_lam ** 2) + np.sum(gp ** 2)))


def _newton_polish(kind, s_hat, params, psi_min, steps=5):
    """A few damped Newton steps on the free coordinates (fallback path)."""
    lam, psi = params.lam.copy(), params.psi.copy()
    p, m = lam.shape
    for _ in range(steps):
        value, grad = loss_and_gradient(kind, s_hat, FactorParams(lam, psi))
        hb = loss_hessian(kind, s_hat, FactorParams(lam, psi))
        g = np.concatenate([grad.grad_lam.ravel(order="F"), grad.grad_psi])
        h = hb.full()
        free = np.ones(g.size, bool)
        free[p * m:] = ~((psi <= psi_min * (1 + 1e-12)) & (grad.grad_psi > 0))
        hf = h[np.ix_(free, free)]
        w, v = np.linalg.eigh(hf)
        w = np.maximum(np.abs(w), 1e-8 * max(1.0, np.abs(w).max()))
        d = np.zeros_like(g)
        d[free] = -v @ ((v.T @ g[free]) / w)
        t = 1.0
        while t > 1e-12:
            new_lam = lam + t * d[:p * m].reshape(p, m, order="F")
            new_psi = np.maximum(psi + t * d[p * m:], psi_min)
            try:
                if loss_value(kind, s_hat, FactorParams(new_lam, new_psi)) < value:
                    lam, psi = new_lam, new_psi
                    break
            except SingularModelError:
                pass
            t *= 0.5
        else:
            break
    return np.concatenate([lam.ravel(), psi])


# --------------------------------------------------------------------------
# Q-step and rotation initialisation


# looser stopping rule for multi-start descents, which only rank candidates
_START_TOL = 1e-9


def _descend_rotation(l_mat, penalty, q, max_iter=300, tol=1e-12):
    """Riemannian subgradient descent of penalty(L Q^T) with polar retraction.

    Steps are accepted only under an Armijo decrease, so the penalty is
    monotone along the iterates.
    """
    current = total_penalty(penalty, l_mat @ q.T)
    step = 1.0 / max(np.abs(l_mat).max(), 1e-12)
    grow = True
    for _ in range(max_iter):
        g_lam = penalty_subgradient(penalty, l_mat @ q.T)
        egrad = g_lam.T @ l_mat
        a = q.T @ egrad
        xi = q @ (0.5 * (a - a.T))
        xnorm2 = float(np.sum(xi * xi))
        if xnorm2 <= tol * tol:
            break
        if grow:
            step *= 2.0
        accepted = False
        tries = 0
        while step > 1e-14:
            tries += 1
            cand = _polar(q - step * xi)
            value = total_penalty(penalty, l_mat @ cand.T)
            if value <= current - 1e-4 * step * xnorm2:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            break
        grow = tries == 1
        improvement = current - value
        q, current = cand, value
        if improvement <= tol * max(1.0, current):
            break
    return q, current


def q_step(l_mat, penalty: PenaltySpec, q_warm, config: EstimatorConfig | None = None,
           rng=None):
    """Minimise ``penalty(L Q^T)`` over orthogonal Q.

    Runs descent from ``q_warm`` and from ``config.q_restarts`` random
    orthogonal starts; a restart replaces the warm start only when its
    penalty is strictly smaller. Returns the orthogonal minimiser found.
    """
    config = config or EstimatorConfig()
    l_mat = np.asarray(l_mat, dtype=float)
    q_warm = np.asarray(q_warm, dtype=float)
    m = q_warm.shape[0]
    if m == 1 or penalty.gamma == 0:
        return q_warm.copy()
    warm_value = total_penalty(penalty, l_mat @ q_warm.T)
    best_q, best = _descend_rotation(l_mat, penalty, q_warm)
    if best > warm_value:
        best_q, best = q_warm.copy(), warm_value
    if config.q_restarts:
        rng = rng if rng is not None else np.random.default_rng(config.seed)
        for _ in range(config.q_restarts):
            cand, value = _descend_rotation(l_mat, penalty, random_orthogonal(m, rng),
                                            tol=_START_TOL)
            if value < best - 1e-12 * max(1.0, abs(best)):
                best_q, best = cand, value
    return best_q


def init_rotation(lambda_hat, penalty: PenaltySpec, grid_size_k: int = 20,
                  seed: int = 0) -> np.ndarray:
    """Rotation Q0 minimising ``penalty(lambda_hat @ Q0)`` over K refined starts.

    The first ``K - 1`` starts are QR-orthogonalised uniform [-2, 2] draws
    and the last is the identity. Ties keep the earliest start, so with a
    flat penalty (``gamma = 0``) the result is a generic, dense rotation.
    """
    lam = np.asarray(lambda_hat, dtype=float)
    m = lam.shape[1]
    rng = np.random.default_rng(seed)
    best_q, best = None, np.inf
    for k in range(grid_size_k):
        start = np.eye(m) if k == grid_size_k - 1 else random_orthogonal(m, rng)
        # descent works on L Q^T, so optimise the transpose
        qt, value = _descend_rotation(lam, penalty, start.T, tol=_START_TOL)
        if value < best:
            best_q, best = qt.T, value
    return best_q


# --------------------------------------------------------------------------
# L-step


def _lipschitz_estimate(kind, s_hat, lam, psi, iters=8):
    """Power iteration on finite-difference Hessian-vector products."""
    rng = np.random.default_rng(0)
    v = rng.standard_normal(lam.shape)
    v /= np.linalg.norm(v)
    _, g0 = loss_and_gradient(kind, s_hat, FactorParams(lam, psi))
    eps = 1e-6 * max(1.0, np.linalg.norm(lam))
    est = 1.0
    for _ in range(iters):
        try:
            _, g1 = loss_and_gradient(kind, s_hat, FactorParams(lam + eps * v, psi))
        except SingularModelError:
            break
        hv = (g1.grad_lam - g0.grad_lam) / eps
        est = float(np.linalg.norm(hv))
        if est == 0:
            break
        v = hv / est
    return max(est, 1e-8)


def l_step(q, psi, s_hat, lambda_warm, config: EstimatorConfig, _log=None):
    """Proximal gradient descent on ``loss(lam, psi) + penalty(lam)``.

    For fixed orthogonal ``q`` the map ``L -> L q^T`` is a bijection, so the
    descent runs directly on ``lam``, where the penalty is separable. Each
    step is accepted only under the quadratic upper-bound condition, which
    makes the penalised objective non-increasing.
    """
    del q  # the problem is the same in lam coordinates for any rotation
    kind, penalty = config.loss, config.penalty
    lam = np.array(lambda_warm, dtype=float)
    psi = np.asarray(psi, dtype=float)
    value, grad = loss_and_gradient(kind, s_hat, FactorParams(lam, psi))
    objective = value + total_penalty(penalty, lam)
    max_step = 0.99 * penalty.max_step
    step = min(1.0 / _lipschitz_estimate(kind, s_hat, lam, psi), max_step)
    for _ in range(config.max_inner_iters):
        g = grad.grad_lam
        accepted = False
        while step > 1e-16:
            cand = prox(penalty, lam - step * g, step)
            diff = cand - lam
            try:
                cand_value, cand_grad = loss_and_gradient(kind, s_hat, FactorParams(cand, psi))
            except SingularModelError:
                step *= 0.5
                continue
            bound = value + np.sum(g * diff) + np.sum(diff * diff) / (2 * step)
            if cand_value <= bound + 1e-12 * max(1.0, abs(value)):
                cand_obj = cand_value + total_penalty(penalty, cand)
                if cand_obj <= objective:
                    accepted = True
                break
            step *= 0.5
        if not accepted:
            break
        change = objective - cand_obj
        moved = float(np.abs(cand - lam).max())
        lam, value, grad, objective = cand, cand_value, cand_grad, cand_obj
        step = min(step * 2.0, max_step)
        if moved <= 1e-12 or change <= config.inner_tol * max(1.0, abs(objective)):
            break
    return lam


# --------------------------------------------------------------------------
# Psi-step


def psi_step(lam, s_hat, loss: LossKind, psi_warm, config: EstimatorConfig,
             max_iter: int = 50):
    """Minimise the loss over the diagonal variances, ``psi >= psi_min``.

    Least squares has the closed form ``max(psi_min, S_kk - (lam lam^T)_kk)``.
    The Gaussian loss uses projected damped Newton steps that never
    increase the loss.
    """
    kind = LossKind(loss)
    lam = np.asarray(lam, dtype=float)
    if kind is LossKind.LEAST_SQUARES:
        return np.maximum(config.psi_min, np.diag(s_hat) - np.sum(lam * lam, axis=1))
    psi = np.maximum(np.asarray(psi_warm, dtype=float), config.psi_min)
    value, grad = loss_and_gradient(kind, s_hat, FactorParams(lam, psi))
    for _ in range(max_iter):
        g = grad.grad_psi
        free = ~((psi <= config.psi_min) & (g > 0))
        if not np.any(free) or np.abs(g[free]).max() <= 1e-12 * max(1.0, abs(value)):
            break
        h = loss_hessian(kind, s_hat, FactorParams(lam, psi)).h_pp[np.ix_(free, free)]
        d = np.zeros_like(psi)
        try:
            c = np.linalg.cholesky(h)
            d[free] = -np.linalg.solve(c.T, np.linalg.solve(c, g[free]))
        except np.linalg.LinAlgError:
            d[free] = -g[free] / np.maximum(np.abs(np.diag(h)), 1e-12)
        t = 1.0
        accepted = False
        while t > 1e-12:
            cand = np.maximum(psi + t * d, config.psi_min)
            try:
                cand_value, cand_grad = loss_and_gradient(kind, s_hat, FactorParams(lam, cand))
            except SingularModelError:
                t *= 0.5
                continue
            if cand_value <= value:
                accepted = True
                break
            t *= 0.5
        if not accepted:
            break
        change = value - cand_value
        psi, value, grad = cand, cand_value, cand_grad
        if change <= 1e-15 * max(1.0, abs(value)):
            break
    return psi


# --------------------------------------------------------------------------
# full pipeline


def _as_s_hat(data_or_shat):
    if isinstance(data_or_shat, DataSet):
        return sample_covariance(data_or_shat)
    return np.asarray(data_or_shat, dtype=float)


def fit_sparse(data_or_shat, m: int, config: EstimatorConfig | None = None,
               ic5: FactorParams | None = None) -> FitResult:
    """Run the full LQ pipeline and return the fitted sparse model.

    ``ic5`` may carry a precomputed unpenalised IC5 fit for the same
    ``s_hat`` (it does not depend on the penalty), which cross-validation
    reuses across the regularisation grid.
    """
    config = config or EstimatorConfig()
    kind, penalty = config.loss, config.penalty
    s_hat = _check_s_hat(_as_s_hat(data_or_shat), kind, config)
    if ic5 is None:
        ic5 = fit_ic5(s_hat, m, kind, config)
    rng = np.random.default_rng([config.seed, 1])

    q0 = init_rotation(ic5.lam, penalty, config.grid_size_k, config.seed)
    lam = ic5.lam @ q0
    psi = ic5.psi.copy()
    q = q0.T  # lam = L q^T
    objective = penalized_objective(kind, s_hat, lam, psi, penalty)
    trace = [objective]
    step_log = [("init", objective)]
    drift = []
    converged = False
    iterations = 0
    for iterations in range(1, config.max_outer_iters + 1):
        lam = l_step(q, psi, s_hat, lam, config)
        step_log.append(("L", penalized_objective(kind, s_hat, lam, psi, penalty)))

        l_mat = lam @ q
        q_new = q_step(l_mat, penalty, q, config, rng)
        if q_new is not q:
            new_lam = l_mat @ q_new.T
            drift.append(float(np.linalg.norm(new_lam @ new_lam.T - lam @ lam.T)))
            lam, q = new_lam, q_new
        step_log.append(("Q", penalized_objective(kind, s_hat, lam, psi, penalty)))

        if not config.skip_psi_step:
            psi = psi_step(lam, s_hat, kind, psi, config)
            step_log.append(("Psi", penalized_objective(kind, s_hat, lam, psi, penalty)))

        new_objective = step_log[-1][1]
        trace.append(new_objective)
        if abs(objective - new_objective) < config.rel_tol * max(1.0, abs(objective)):
            converged = True
            objective = new_objective
            break
        objective = new_objective

    try:
        _, q_hat = extract_rotation(lam)
    except ValueError:
        q_hat = _lq(lam)[1]
    support = np.abs(lam) > config.zero_tol
    logger.debug("fit_sparse: %d outer iterations, objective %.6g, %d nonzeros",
                 iterations, objective, int(support.sum()))
    return FitResult(FactorParams(lam, psi), q_hat, trace, support, converged,
                     iterations, config, step_log, drift)
