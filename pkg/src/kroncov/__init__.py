"""Quadratic-form estimation of Kronecker product covariance models.

The estimator, the LM/Wald mean tests built on it, a Ledoit-Wolf baseline and
a Monte Carlo harness for comparing them.
"""

__version__ = "0.1.0"

from .baselines import ShrinkageEstimate, lw04_fit
from .estimator import (
    DegenerateTraceError,
    KroneckerCovEstimate,
    SingularFactorError,
    fit,
    fit_data,
    precision,
    quad_form_precision,
    sample_covariance,
    sample_covariance_known_mean,
    sample_mean,
)
from .inference import (
    LinearRestriction,
    MeanTestResult,
    linear_restriction_test,
    lm_test,
    local_power_center,
    simultaneous_bound,
    wald_test,
)
from .tensorlin import FactorShape

__all__ = [
    "DegenerateTraceError",
    "FactorShape",
    "KroneckerCovEstimate",
    "LinearRestriction",
    "MeanTestResult",
    "ShrinkageEstimate",
    "SingularFactorError",
    "fit",
    "fit_data",
    "linear_restriction_test",
    "lm_test",
    "local_power_center",
    "lw04_fit",
    "precision",
    "quad_form_precision",
    "sample_covariance",
    "sample_covariance_known_mean",
    "sample_mean",
    "simultaneous_bound",
    "wald_test",
]
