"""SCAD and MCP penalties: values, derivatives and scaled proximal maps.

All functions are vectorised over their array argument and applied
elementwise; the penalty of a loading matrix is the sum over its entries.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

DEFAULT_SCAD_A = 3.7
DEFAULT_MCP_B = 3.5


class Family(str, Enum):
    SCAD = "scad"
    MCP = "mcp"


@dataclass(frozen=True)
class PenaltySpec:
    """Penalty family, shape parameter and regularisation level ``gamma``.

    ``shape`` is ``a`` for SCAD (must exceed 2) and ``b`` for MCP (must be
    positive). When omitted the usual defaults 3.7 and 3.5 are used.
    """

    family: Family = Family.SCAD
    gamma: float = 0.0
    shape: float | None = None

    def __post_init__(self):
        family = Family(self.family)
        object.__setattr__(self, "family", family)
        if self.shape is None:
            object.__setattr__(
                self, "shape",
                DEFAULT_SCAD_A if family is Family.SCAD else DEFAULT_MCP_B)
        if family is Family.SCAD and not self.shape > 2:
            raise ValueError(f"SCAD needs a > 2, got {self.shape}")
        if family is Family.MCP and not self.shape > 0:
            raise ValueError(f"MCP needs b > 0, got {self.shape}")
        if not self.gamma >= 0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")

    def with_gamma(self, gamma: float) -> PenaltySpec:
        return PenaltySpec(self.family, float(gamma), self.shape)

    @property
    def max_step(self) -> float:
        """Largest prox step for which the prox objective stays convex."""
        return self.shape - 1.0 if self.family is Family.SCAD else self.shape


def _check_nonneg(x):
    x = np.asarray(x, dtype=float)
    if np.any(x < 0):
        raise ValueError("penalty argument must be non-negative")
    return x


def _value(spec, x):
    g, a = spec.gamma, spec.shape
    if spec.family is Family.SCAD:
        mid = (2 * a * g * x - x * x - g * g) / (2 * (a - 1))
        return np.where(x <= g, g * x, np.where(x <= a * g, mid, (a + 1) * g * g / 2))
    return np.where(x <= a * g, g * x - x * x / (2 * a), a * g * g / 2)


def _derivative(spec, x):
    g, a = spec.gamma, spec.shape
    if g == 0:
        return np.zeros_like(x)
    if spec.family is Family.SCAD:
        return np.where(x <= g, g, np.maximum(a * g - x, 0.0) / (a - 1))
    return np.maximum(a * g - x, 0.0) / a


def penalty_value(spec: PenaltySpec, x):
    out = _value(spec, _check_nonneg(x))
    return out if out.ndim else float(out)


def penalty_derivative(spec: PenaltySpec, x):
    """The derivative ``q(x, gamma)`` of the penalty for ``x >= 0``.

    At ``x = 0`` this returns the right derivative ``gamma``.
    """
    out = _derivative(spec, _check_nonneg(x))
    return out if out.ndim else float(out)


def total_penalty(spec: PenaltySpec, lam) -> float:
    """Sum of elementwise penalties over all entries of ``lam``."""
    if spec.gamma == 0:
        return 0.0
    return float(_value(spec, np.abs(lam)).sum())


def penalty_subgradient(spec: PenaltySpec, lam):
    """``q(|lam|) * sgn(lam)`` with ``sgn(0) = 0``."""
    lam = np.asarray(lam, dtype=float)
    return _derivative(spec, np.abs(lam)) * np.sign(lam)


def prox(spec: PenaltySpec, z, step: float):
    """argmin_u (u - z)^2 / (2 step) + p(|u|), elementwise.

    Requires ``step < a - 1`` (SCAD) or ``step < b`` (MCP) so that the
    objective is strictly convex and the closed form below is its unique
    minimiser.
    """
    if not step > 0:
        raise ValueError(f"prox step must be positive, got {step}")
    if not step < spec.max_step:
        raise ValueError(
            f"prox step {step} violates the convexity bound {spec.max_step} "
            f"for {spec.family.value}; reduce the step")
    z = np.asarray(z, dtype=float)
    g, a, t = spec.gamma, spec.shape, step
    az = np.abs(z)
    sz = np.sign(z)
    soft = sz * np.maximum(az - t * g, 0.0)
    if spec.family is Family.SCAD:
        mid = sz * ((a - 1) * az - t * a * g) / (a - 1 - t)
        out = np.where(az <= g * (1 + t), soft, np.where(az <= a * g, mid, z))
    else:
        mid = sz * (az - t * g) / (1 - t / a)
        out = np.where(az <= t * g, 0.0, np.where(az <= a * g, mid, z))
    return out if out.ndim else float(out)
