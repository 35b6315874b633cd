"""Quadratic-form estimator of the Kronecker product covariance model.

The model is ``Sigma = sigma2 * Sigma_1 kron ... kron Sigma_v`` with every
factor normalized to ``trace(Sigma_j) = n_j``.  Each factor is recovered
from the partial trace of the (rotated) sample covariance, then rescaled to
its identifying trace; ``sigma2`` is ``trace(M) / n``.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.linalg import solve_triangular

from .tensorlin import (
    FactorShape,
    NotPositiveDefiniteError,
    cholesky,
    invert_spd,
    kron_materialize,
    kron_matvec,
    rotated_partial_trace,
    sym,
)

TRACE_RTOL = 1e-12


class DegenerateTraceError(ArithmeticError):
    """A trace that must be positive vanished (e.g. constant data)."""


class SingularFactorError(ArithmeticError):
    """A factor matrix could not be inverted."""

    def __init__(self, index: int, message: str):
        self.index = index
        super().__init__(message)


class NotPSDWarning(UserWarning):
    """The moment matrix handed to :func:`fit` was not positive semidefinite."""


def as_data(data) -> np.ndarray:
    """Validate a ``(T, n)`` panel of observations."""
    Y = np.asarray(data, dtype=float)
    if Y.ndim != 2:
        raise ValueError(f"data must be a (T, n) array, got shape {Y.shape}")
    if not np.all(np.isfinite(Y)):
        raise ValueError("data has non-finite entries")
    return Y


def sample_mean(data) -> np.ndarray:
    Y = as_data(data)
    if Y.shape[0] < 1:
        raise ValueError("need at least one observation")
    return Y.mean(axis=0)


def sample_covariance(data) -> np.ndarray:
    """Sample covariance with divisor ``T`` (not ``T - 1``)."""
    Y = as_data(data)
    T = Y.shape[0]
    if T < 2:
        raise ValueError(f"sample covariance needs T >= 2, got T={T}")
    Z = Y - Y.mean(axis=0)
    M = Z.T @ Z / T
    return 0.5 * (M + M.T)


def sample_covariance_known_mean(data, mu) -> np.ndarray:
    """Second moment about a known mean, ``(1/T) sum (y_t - mu)(y_t - mu)^T``."""
    Y = as_data(data)
    mu = np.asarray(mu, dtype=float).reshape(-1)
    if mu.shape[0] != Y.shape[1]:
        raise ValueError(f"mean has length {mu.shape[0]}, data has n={Y.shape[1]}")
    if Y.shape[0] < 1:
        raise ValueError("need at least one observation")
    Z = Y - mu
    M = Z.T @ Z / Y.shape[0]
    return 0.5 * (M + M.T)


@dataclass(frozen=True)
class KroneckerCovEstimate:
    """``sigma2 * factors[0] kron ... kron factors[-1]``.

    Covariance-side estimates carry ``trace(factors[j]) == n_j``; the
    precision returned by :func:`precision` does not.
    """

    sigma2: float
    factors: tuple[np.ndarray, ...]
    shape: FactorShape
    psd_input: bool = field(default=True, compare=False)

    def __post_init__(self):
        shape = FactorShape.parse(self.shape)
        factors = tuple(np.asarray(F, dtype=float) for F in self.factors)
        if len(factors) != shape.v:
            raise ValueError(f"{len(factors)} factors for a {shape.v}-factor shape")
        for j, (F, d) in enumerate(zip(factors, shape.dims)):
            if F.shape != (d, d):
                raise ValueError(f"factor {j + 1} has shape {F.shape}, expected ({d}, {d})")
        if not self.sigma2 > 0:
            raise ValueError(f"sigma2 must be positive, got {self.sigma2}")
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "factors", factors)
        object.__setattr__(self, "sigma2", float(self.sigma2))

    @property
    def n(self) -> int:
        return self.shape.n

    def materialize(self, cap: int | None = None) -> np.ndarray:
        if cap is None:
            return kron_materialize(self.factors, self.sigma2)
        return kron_materialize(self.factors, self.sigma2, cap=cap)

    def matvec(self, x) -> np.ndarray:
        return kron_matvec(self.factors, self.sigma2, x)

    def frobenius_sq(self) -> float:
        return self.sigma2**2 * float(np.prod([np.sum(F * F) for F in self.factors]))

    def to_dict(self) -> dict:
        return {
            "shape": list(self.shape.dims),
            "sigma2": self.sigma2,
            "factors": [F.tolist() for F in self.factors],
        }

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_dict(), **kwargs)

    @classmethod
    def from_dict(cls, d: dict) -> "KroneckerCovEstimate":
        return cls(
            sigma2=float(d["sigma2"]),
            factors=tuple(np.array(F, dtype=float) for F in d["factors"]),
            shape=FactorShape.parse(d["shape"]),
        )

    @classmethod
    def from_json(cls, text: str) -> "KroneckerCovEstimate":
        return cls.from_dict(json.loads(text))


def fit(M, shape: FactorShape | Sequence[int] | str, *, check_psd: bool = True) -> KroneckerCovEstimate:
    """Quadratic-form estimate from a symmetric moment matrix ``M``.

    Parameters
    ----------
    M : (n, n) array
        Usually the sample covariance; any symmetric matrix is accepted.  A
        :class:`NotPSDWarning` is issued if it is not positive semidefinite,
        since the PSD guarantee on the factors then no longer holds.
    shape : FactorShape, sequence of int or str like ``"2x5x2"``
        Factorization with ``prod(shape) == n``.
    check_psd : bool
        Run the eigenvalue check behind :class:`NotPSDWarning`.  Callers that
        pass a sample covariance can skip it; it costs ``O(n^3)``.

    Raises
    ------
    DegenerateTraceError
        If ``trace(M)`` or the trace of some partial trace is not above
        ``1e-12 * n``.
    """
    shape = FactorShape.parse(shape)
    M = sym(M, name="moment matrix")
    n = shape.n
    if M.shape[0] != n:
        raise ValueError(f"moment matrix has order {M.shape[0]}, shape {shape} has n={n}")
    tol = TRACE_RTOL * n
    total = float(np.trace(M))
    if not total > tol:
        raise DegenerateTraceError(f"trace of the moment matrix is {total:g}; cannot normalize")

    psd = True
    if check_psd:
        lam = np.linalg.eigvalsh(M)
        psd = bool(lam[0] >= -1e-10 * max(abs(lam[-1]), 1e-300))
        if not psd:
            warnings.warn("moment matrix is not positive semidefinite", NotPSDWarning, stacklevel=2)

    factors = []
    for h, nh in enumerate(shape.dims, start=1):
        d = rotated_partial_trace(M, shape, h)
        tr = float(np.trace(d))
        if not tr > tol:
            raise DegenerateTraceError(f"partial trace for factor h={h} has trace {tr:g}")
        F = d * (nh / tr)
        factors.append(0.5 * (F + F.T))
    return KroneckerCovEstimate(total / n, tuple(factors), shape, psd_input=psd)


def fit_data(data, shape, mu=None) -> KroneckerCovEstimate:
    """Fit from raw observations; ``mu=None`` estimates the mean."""
    M = sample_covariance(data) if mu is None else sample_covariance_known_mean(data, mu)
    return fit(M, shape, check_psd=False)


def precision(est: KroneckerCovEstimate) -> KroneckerCovEstimate:
    """Structured inverse ``sigma2**-1 * inv(F_1) kron ... kron inv(F_v)``."""
    inverses = []
    for j, F in enumerate(est.factors):
        try:
            inverses.append(invert_spd(F))
        except NotPositiveDefiniteError as exc:
            raise SingularFactorError(j, f"factor {j + 1} is not positive definite (pivot {exc.pivot})") from exc
    return KroneckerCovEstimate(1.0 / est.sigma2, tuple(inverses), est.shape)


def quad_form_precision(est: KroneckerCovEstimate, x) -> float:
    """``x^T inv(est) x`` computed factor-wise through Cholesky solves."""
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.shape[0] != est.n:
        raise ValueError(f"vector has length {x.shape[0]}, estimate has n={est.n}")
    # x^T (kron F_j)^{-1} x = ||(kron L_j)^{-1} x||^2 with F_j = L_j L_j^T
    inv_chol = []
    for j, F in enumerate(est.factors):
        try:
            L = cholesky(F)
        except NotPositiveDefiniteError as exc:
            raise SingularFactorError(j, f"factor {j + 1} is not positive definite (pivot {exc.pivot})") from exc
        inv_chol.append(solve_triangular(L, np.eye(L.shape[0]), lower=True))
    z = kron_matvec(inv_chol, 1.0, x)
    return float(z @ z) / est.sigma2


def kron_inner(a: KroneckerCovEstimate, b: KroneckerCovEstimate) -> float:
    """Frobenius inner product of two Kronecker products with matching shapes."""
    if a.shape != b.shape:
        raise ValueError(f"shapes differ: {a.shape} vs {b.shape}")
    return a.sigma2 * b.sigma2 * float(np.prod([np.sum(A * B) for A, B in zip(a.factors, b.factors)]))


def kron_distance_sq(a: KroneckerCovEstimate, b: KroneckerCovEstimate) -> float:
    """``||a - b||_F^2`` without materializing either matrix."""
    return max(a.frobenius_sq() + b.frobenius_sq() - 2.0 * kron_inner(a, b), 0.0)
