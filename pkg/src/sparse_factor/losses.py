"""Gaussian and least-squares losses with analytic derivatives.

Both losses are written in terms of the sample second-moment matrix
``S``:

* Gaussian: ``tr(S Sigma^{-1}) + log|Sigma|``
* least squares: ``||S - Sigma||_F^2``

with ``Sigma = lam lam^T + diag(psi)``. Parameters are vectorised
column-major, ``theta_lam = vec(lam)``, and ``theta_psi = psi``.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy import linalg

from .model import FactorParams, assemble_sigma
from .penalties import PenaltySpec, penalty_subgradient


class SingularModelError(np.linalg.LinAlgError):
    """Raised when the implied covariance is not positive definite."""


class LossKind(str, Enum):
    GAUSSIAN = "gaussian"
    LEAST_SQUARES = "ls"


@dataclass(frozen=True)
class GradientPair:
    grad_lam: np.ndarray
    grad_psi: np.ndarray


@dataclass(frozen=True)
class HessianBlocks:
    """Second derivatives after restricting Psi to its diagonal.

    ``h_ll`` is (pm, pm), ``h_lp`` is (pm, p) and ``h_pp`` is (p, p).
    """

    h_ll: np.ndarray
    h_lp: np.ndarray
    h_pp: np.ndarray

    def full(self) -> np.ndarray:
        return np.block([[self.h_ll, self.h_lp], [self.h_lp.T, self.h_pp]])


@dataclass(frozen=True)
class ConstraintSpec:
    """Lower-triangular identification of the rotated loadings ``lam @ rotation``.

    The constraints are the strictly upper entries of the top m x m block
    of ``lam @ rotation``, ordered row by row.
    """

    rotation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=float)
        if r.ndim != 2 or r.shape[0] != r.shape[1]:
            raise ValueError("rotation must be square")
        if not np.allclose(r.T @ r, np.eye(r.shape[0]), atol=1e-10, rtol=0):
            raise ValueError("rotation must be orthogonal")
        object.__setattr__(self, "rotation", r)

    @classmethod
    def identity(cls, m: int) -> ConstraintSpec:
        return cls(np.eye(m))

    @property
    def m(self) -> int:
        return self.rotation.shape[0]

    @property
    def constraint_count(self) -> int:
        return self.m * (self.m - 1) // 2

    def positions(self) -> list[tuple[int, int]]:
        return [(s, t) for s in range(self.m) for t in range(s + 1, self.m)]


def _cholesky(sigma):
    if not np.all(np.isfinite(sigma)):
        raise SingularModelError("implied covariance has non-finite entries")
    try:
        return linalg.cho_factor(sigma, lower=True, check_finite=False)
    except linalg.LinAlgError as exc:
        raise SingularModelError("implied covariance is not positive definite") from exc


def _gaussian_parts(s_hat, params):
    sigma = assemble_sigma(params)
    cf = _cholesky(sigma)
    sinv = linalg.cho_solve(cf, np.eye(sigma.shape[0]), check_finite=False)
    sinv = 0.5 * (sinv + sinv.T)
    logdet = 2.0 * np.sum(np.log(np.diag(cf[0])))
    return sigma, sinv, logdet


def loss_value(kind: LossKind, s_hat: np.ndarray, params: FactorParams) -> float:
    kind = LossKind(kind)
    if kind is LossKind.GAUSSIAN:
        cf = _cholesky(assemble_sigma(params))
        logdet = 2.0 * np.sum(np.log(np.diag(cf[0])))
        return float(np.trace(linalg.cho_solve(cf, s_hat, check_finite=False)) + logdet)
    diff = s_hat - assemble_sigma(params)
    return float(np.sum(diff * diff))


def loss_and_gradient(kind: LossKind, s_hat, params):
    """Loss value together with its gradient (one factorisation)."""
    kind = LossKind(kind)
    if kind is LossKind.GAUSSIAN:
        _, sinv, logdet = _gaussian_parts(s_hat, params)
        ss = s_hat @ sinv
        value = float(np.trace(ss) + logdet)
        v = sinv - sinv @ ss
        v = 0.5 * (v + v.T)
    else:
        diff = assemble_sigma(params) - s_hat
        value = float(np.sum(diff * diff))
        v = 2.0 * diff
    return value, GradientPair(2.0 * v @ params.lam, np.diag(v).copy())


def loss_gradient(kind: LossKind, s_hat, params) -> GradientPair:
    return loss_and_gradient(kind, s_hat, params)[1]


def commutation_perm(p: int, m: int) -> np.ndarray:
    """Index permutation ``k`` with ``vec(X.T) = vec(X)[k]`` for X of shape (p, m)."""
    return np.arange(p * m).reshape(m, p).T.ravel()


def _quadratic_trace_adb_d(a, b, lam, perm):
    """Matrix M with tr(A D B D) = vec(X)^T M vec(X), D = X lam^T + lam X^T.

    A and B must be symmetric. M is not symmetrised.
    """
    left = np.kron(b @ lam, lam.T @ a)  # acts as K^T (B lam (x) lam^T A)
    term_k = np.empty_like(left)
    term_k[perm, :] = left
    return 2.0 * term_k + np.kron(lam.T @ b @ lam, a) + np.kron(lam.T @ a @ lam, b)


def loss_hessian(kind: LossKind, s_hat, params) -> HessianBlocks:
    kind = LossKind(kind)
    lam = params.lam
    p, m = lam.shape
    perm = commutation_perm(p, m)
    eye_m = np.eye(m)
    if kind is LossKind.GAUSSIAN:
        _, sinv, _ = _gaussian_parts(s_hat, params)
        v = sinv - sinv @ s_hat @ sinv
        v = 0.5 * (v + v.T)
        quad = (_quadratic_trace_adb_d(sinv, sinv, lam, perm)
                - 2.0 * _quadratic_trace_adb_d(sinv, v, lam, perm)
                + 2.0 * np.kron(eye_m, v))
        sl, vl = sinv @ lam, v @ lam
        # d/dpsi_k of 2 V lam, stacked as vec over (i, j)
        h_lp = 2.0 * (np.einsum("ik,kj->jik", sinv, sl)
                      - np.einsum("ik,kj->jik", sinv, vl)
                      - np.einsum("ik,kj->jik", v, sl)).reshape(p * m, p)
        h_pp = sinv * sinv - 2.0 * sinv * v
    else:
        v = 2.0 * (assemble_sigma(params) - s_hat)
        eye_p = np.eye(p)
        quad = 2.0 * _quadratic_trace_adb_d(eye_p, eye_p, lam, perm) + 2.0 * np.kron(eye_m, v)
        h_lp = 4.0 * np.einsum("ik,kj->jik", eye_p, lam).reshape(p * m, p)
        h_pp = 2.0 * eye_p
    h_ll = quad + quad.T  # Hessian is twice the symmetric part of the quadratic form
    h_ll *= 0.5
    return HessianBlocks(h_ll, h_lp, 0.5 * (h_pp + h_pp.T))


def constraint_value(lam: np.ndarray, spec: ConstraintSpec) -> np.ndarray:
    rotated = np.asarray(lam) @ spec.rotation
    return np.array([rotated[s, t] for s, t in spec.positions()], dtype=float)


def constraint_jacobian(lam: np.ndarray, spec: ConstraintSpec) -> np.ndarray:
    """Jacobian of :func:`constraint_value` w.r.t. vec(lam), shape (r, pm).

    ``d h_l / d lam[s, t] = R[t, t_l]`` when ``s == s_l`` and 0 otherwise.
    """
    lam = np.asarray(lam)
    p, m = lam.shape
    if m != spec.m:
        raise ValueError("rotation size does not match the number of factors")
    pos = spec.positions()
    jac = np.zeros((len(pos), p * m))
    for row, (s_l, t_l) in enumerate(pos):
        for t in range(m):
            jac[row, t * p + s_l] = spec.rotation[t, t_l]
    return jac


def estimating_residual(params: FactorParams, eta, spec: ConstraintSpec,
                        s_hat, kind: LossKind, penalty: PenaltySpec) -> np.ndarray:
    """Stacked penalised estimating equations, length pm + p + r.

    The penalty contributes ``q(|theta|) sgn(theta)`` with ``sgn(0) = 0``.
    """
    eta = np.asarray(eta, dtype=float).reshape(-1)
    if eta.shape[0] != spec.constraint_count:
        raise ValueError("eta length must equal the number of constraints")
    grad = loss_gradient(kind, s_hat, params)
    lam_part = (grad.grad_lam.ravel(order="F")
                + constraint_jacobian(params.lam, spec).T @ eta
                + penalty_subgradient(penalty, params.lam).ravel(order="F"))
    return np.concatenate([lam_part, grad.grad_psi, constraint_value(params.lam, spec)])
