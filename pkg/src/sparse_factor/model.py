"""Factor-model parameters, datasets and covariance assembly."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class DataError(ValueError):
    """Raised for malformed or inconsistent input data."""


@dataclass(frozen=True)
class FactorParams:
    """Loadings ``lam`` (p x m) and idiosyncratic variances ``psi`` (p,).

    The factors are orthogonal with unit variance, so the implied
    covariance is ``lam @ lam.T + diag(psi)``.
    """

    lam: np.ndarray
    psi: np.ndarray

    def __post_init__(self):
        lam = np.asarray(self.lam, dtype=float)
        psi = np.asarray(self.psi, dtype=float)
        if lam.ndim != 2:
            raise ValueError(f"lam must be 2-d, got shape {lam.shape}")
        if psi.ndim != 1 or psi.shape[0] != lam.shape[0]:
            raise ValueError(
                f"psi length {psi.shape} does not match lam rows {lam.shape[0]}")
        p, m = lam.shape
        if not p >= m >= 1:
            raise ValueError(f"need p >= m >= 1, got p={p}, m={m}")
        if np.any(psi <= 0):
            raise ValueError("psi entries must be strictly positive")
        object.__setattr__(self, "lam", lam)
        object.__setattr__(self, "psi", psi)

    @property
    def p(self) -> int:
        return self.lam.shape[0]

    @property
    def m(self) -> int:
        return self.lam.shape[1]


@dataclass(frozen=True)
class DataSet:
    """Observations stored row-wise (n x p).

    ``centered=True`` means the rows are taken to be mean zero and are never
    de-meaned; otherwise column means are removed before forming second
    moments.
    """

    observations: np.ndarray
    centered: bool = False
    columns: tuple[str, ...] | None = None

    def __post_init__(self):
        x = np.asarray(self.observations, dtype=float)
        if x.ndim != 2:
            raise DataError(f"observations must be 2-d, got shape {x.shape}")
        if x.shape[0] < 2:
            raise DataError(f"need at least 2 observations, got {x.shape[0]}")
        if not np.all(np.isfinite(x)):
            raise DataError("observations contain non-finite values")
        object.__setattr__(self, "observations", x)

    @property
    def n(self) -> int:
        return self.observations.shape[0]

    @property
    def p(self) -> int:
        return self.observations.shape[1]

    def subset(self, rows) -> DataSet:
        return DataSet(self.observations[rows], self.centered, self.columns)

    @classmethod
    def from_csv(cls, path, centered: bool = False) -> DataSet:
        """Read a numeric CSV with an optional header row."""
        rows = []
        header = None
        with open(Path(path), newline="", encoding="utf-8") as fh:
            for lineno, record in enumerate(csv.reader(fh), start=1):
                if not record or all(not c.strip() for c in record):
                    continue
                try:
                    values = [float(c) for c in record]
                except ValueError:
                    if lineno == 1 and header is None and not rows:
                        header = tuple(c.strip() for c in record)
                        continue
                    raise DataError(
                        f"{path}: line {lineno}: non-numeric entry") from None
                width = len(header) if header else (len(rows[0]) if rows else len(values))
                if len(values) != width:
                    raise DataError(
                        f"{path}: line {lineno}: expected {width} columns, "
                        f"got {len(values)}")
                rows.append(values)
        if not rows:
            raise DataError(f"{path}: no data rows")
        return cls(np.array(rows), centered=centered, columns=header)


def assemble_sigma(params: FactorParams) -> np.ndarray:
    """Return ``lam lam^T + diag(psi)``."""
    sigma = params.lam @ params.lam.T
    sigma[np.diag_indices_from(sigma)] += params.psi
    return sigma


def second_moment(x: np.ndarray) -> np.ndarray:
    """``n^{-1} sum_i x_i x_i^T`` without any de-meaning."""
    s = x.T @ x / x.shape[0]
    return 0.5 * (s + s.T)


def sample_covariance(data: DataSet) -> np.ndarray:
    """Sample covariance with 1/n normalisation.

    Columns are de-meaned first unless ``data.centered`` is set.
    """
    x = data.observations
    if x.shape[0] < 2:
        raise DataError("sample covariance needs n >= 2")
    if not data.centered:
        x = x - x.mean(axis=0)
    return second_moment(x)
