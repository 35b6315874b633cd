"""LM and Wald tests of a mean vector built on the quadratic-form precision.

Both statistics are ``T (ybar - mu0)^T inv(S) (ybar - mu0)``.  The LM version
fits ``S`` from the second moment about ``mu0``; the Wald version from the
ordinary sample covariance.  As ``n, T`` grow, ``(stat - n) / sqrt(2n)`` is
standard normal under the null and the test rejects in the upper tail.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy import linalg, special

from .estimator import (
    KroneckerCovEstimate,
    as_data,
    fit,
    quad_form_precision,
    sample_covariance,
    sample_covariance_known_mean,
)
from .tensorlin import FactorShape

RANK_RTOL = 1e-10


def gaussian_upper_p(z: float) -> float:
    """``1 - Phi(z)``."""
    return float(special.ndtr(-z))


def chi2_upper_p(x: float, q: int) -> float:
    """Upper tail of the chi-square law with ``q`` degrees of freedom."""
    if q < 1:
        raise ValueError(f"degrees of freedom must be >= 1, got {q}")
    if x <= 0:
        return 1.0
    return float(special.chdtrc(q, x))


def gaussian_upper_quantile(alpha: float) -> float:
    """``z_alpha`` with ``1 - Phi(z_alpha) = alpha``."""
    return float(-special.ndtri(alpha))


def standardize(statistic: float, n: int) -> float:
    return (statistic - n) / math.sqrt(2 * n)


@dataclass(frozen=True)
class MeanTestResult:
    test: str
    statistic: float
    standardized: float
    p_value: float
    n: int
    p_value_chi2: float
    p_value_two_sided: float
    alpha: float | None = None
    reject: bool | None = None

    @property
    def df(self) -> int:
        return self.n

    def to_dict(self) -> dict:
        d = asdict(self)
        d["df"] = self.df
        return d

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_dict(), **kwargs)


def mean_test_result(
    test: str, statistic: float, n: int, alpha: float | None = None, two_sided: bool = False
) -> MeanTestResult:
    """Package a raw statistic; ``reject`` uses the upper tail unless ``two_sided``."""
    z = standardize(statistic, n)
    p = gaussian_upper_p(z)
    p2 = min(1.0, 2.0 * gaussian_upper_p(abs(z)))
    decision_p = p2 if two_sided else p
    return MeanTestResult(
        test=test,
        statistic=float(statistic),
        standardized=z,
        p_value=p,
        n=n,
        p_value_chi2=chi2_upper_p(statistic, n),
        p_value_two_sided=p2,
        alpha=alpha,
        reject=None if alpha is None else bool(decision_p < alpha),
    )


def mean_statistic(ybar, mu0, est: KroneckerCovEstimate, T: int) -> float:
    """``T (ybar - mu0)^T inv(est) (ybar - mu0)``."""
    diff = np.asarray(ybar, dtype=float) - np.asarray(mu0, dtype=float)
    return T * quad_form_precision(est, diff)


def _prepare(data, mu0, shape):
    Y = as_data(data)
    shape = FactorShape.parse(shape)
    if Y.shape[1] != shape.n:
        raise ValueError(f"data has n={Y.shape[1]} columns, shape {shape} has n={shape.n}")
    mu0 = np.asarray(mu0, dtype=float).reshape(-1)
    if mu0.shape[0] != shape.n:
        raise ValueError(f"mu0 has length {mu0.shape[0]}, expected {shape.n}")
    return Y, mu0, shape


def lm_test(data, mu0, shape, alpha: float | None = None, two_sided: bool = False) -> MeanTestResult:
    """LM test of ``H0: mu = mu0`` using the covariance fitted under the null."""
    Y, mu0, shape = _prepare(data, mu0, shape)
    T = Y.shape[0]
    est = fit(sample_covariance_known_mean(Y, mu0), shape, check_psd=False)
    stat = mean_statistic(Y.mean(axis=0), mu0, est, T)
    return mean_test_result("lm", stat, shape.n, alpha, two_sided)


def wald_test(data, mu0, shape, alpha: float | None = None, two_sided: bool = False) -> MeanTestResult:
    """Wald (Hotelling-type) test of ``H0: mu = mu0``."""
    Y, mu0, shape = _prepare(data, mu0, shape)
    T = Y.shape[0]
    est = fit(sample_covariance(Y), shape, check_psd=False)
    stat = mean_statistic(Y.mean(axis=0), mu0, est, T)
    return mean_test_result("wald", stat, shape.n, alpha, two_sided)


@dataclass(frozen=True)
class LinearRestriction:
    """``H0: R mu = r`` with ``R`` of full row rank ``q``."""

    R: np.ndarray
    r: np.ndarray

    def __post_init__(self):
        R = np.atleast_2d(np.asarray(self.R, dtype=float))
        r = np.asarray(self.r, dtype=float).reshape(-1)
        q, n = R.shape
        if r.shape[0] != q:
            raise ValueError(f"r has length {r.shape[0]}, R has {q} rows")
        if q > n:
            raise ValueError(f"more restrictions ({q}) than coordinates ({n})")
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(r))):
            raise ValueError("restriction has non-finite entries")
        _, Rq, _ = linalg.qr(R.T, mode="economic", pivoting=True)
        diag = np.abs(np.diag(Rq))
        scale = diag[0] if diag.size else 0.0
        rank = int(np.sum(diag > RANK_RTOL * scale)) if scale > 0 else 0
        if rank < q:
            raise ValueError(f"R has rank {rank} < q={q}")
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "r", r)

    @property
    def q(self) -> int:
        return self.R.shape[0]

    def normalized(self) -> "LinearRestriction":
        """Rescale every row of ``(R, r)`` so the rows of ``R`` have unit l2 norm."""
        s = np.linalg.norm(self.R, axis=1)
        return LinearRestriction(self.R / s[:, None], self.r / s)


@dataclass(frozen=True)
class LinearRestrictionResult:
    statistic: float
    p_value: float
    q: int

    def to_dict(self) -> dict:
        return {"statistic": self.statistic, "p_value": self.p_value, "df": self.q}


def linear_restriction_test(data, restr: LinearRestriction, shape) -> LinearRestrictionResult:
    """Wald test of ``R mu = r``; chi-square with ``q`` degrees of freedom under the null."""
    Y = as_data(data)
    shape = FactorShape.parse(shape)
    if restr.R.shape[1] != shape.n or Y.shape[1] != shape.n:
        raise ValueError(f"dimension mismatch: R has {restr.R.shape[1]} columns, data {Y.shape[1]}, shape n={shape.n}")
    T = Y.shape[0]
    est = fit(sample_covariance(Y), shape, check_psd=False)
    V = restr.R @ est.matvec(restr.R).T
    try:
        c, lower = linalg.cho_factor(0.5 * (V + V.T))
    except linalg.LinAlgError as exc:
        raise ArithmeticError("R S R^T is not positive definite") from exc
    d = restr.R @ Y.mean(axis=0) - restr.r
    stat = float(T * d @ linalg.cho_solve((c, lower), d))
    return LinearRestrictionResult(stat, chi2_upper_p(stat, restr.q), restr.q)


def simultaneous_bound(data, phi, mu, shape) -> float:
    """Standardized bound for the contrast ``phi``; compare with ``z_alpha``.

    Holds simultaneously over all ``phi`` because it never exceeds the
    standardized Wald statistic at the same ``mu``.
    """
    Y, mu, shape = _prepare(data, mu, shape)
    phi = np.asarray(phi, dtype=float).reshape(-1)
    if phi.shape[0] != shape.n:
        raise ValueError(f"phi has length {phi.shape[0]}, expected {shape.n}")
    if not np.any(phi):
        raise ValueError("phi must be nonzero")
    T = Y.shape[0]
    est = fit(sample_covariance(Y), shape, check_psd=False)
    num = T * float(phi @ (Y.mean(axis=0) - mu)) ** 2
    return standardize(num / float(phi @ est.matvec(phi)), shape.n)


def local_power_center(theta, truth: KroneckerCovEstimate) -> float:
    """Center ``s / sqrt(2n + 4s)``, ``s = theta^T inv(Sigma) theta``, of the Wald statistic."""
    s = quad_form_precision(truth, theta)
    n = truth.n
    return s / math.sqrt(2 * n * (1 + 2 * s / n))

