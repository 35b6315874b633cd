"""Comparator estimators: the sample covariance and Ledoit-Wolf (2004) shrinkage.

The linear shrinkage estimator is the convex combination

    (b2 / d2) * m * I + (1 - b2 / d2) * S

with ``S`` the divisor-``T`` sample covariance, ``m = tr(S) / n``,
``d2 = ||S - m I||^2``, ``b2 = min(d2, T^-2 sum_t ||x_t x_t^T - S||^2)`` and
``||.||`` the Frobenius norm scaled by ``1/n``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .estimator import as_data
from .tensorlin import invert_spd


@dataclass(frozen=True)
class ShrinkageEstimate:
    matrix: np.ndarray
    intensity: float
    target_scale: float

    def inverse(self) -> np.ndarray:
        return invert_spd(self.matrix)

    def to_dict(self) -> dict:
        return {
            "intensity": self.intensity,
            "target_scale": self.target_scale,
            "matrix": self.matrix.tolist(),
        }

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_dict(), **kwargs)


def lw04_fit(data, mu=None) -> ShrinkageEstimate:
    """Ledoit-Wolf linear shrinkage towards a multiple of the identity.

    Parameters
    ----------
    data : (T, n) array
    mu : (n,) array, optional
        Known mean.  By default the sample mean is subtracted (``T >= 2``).
    """
    Y = as_data(data)
    T, n = Y.shape
    if mu is None:
        if T < 2:
            raise ValueError(f"need T >= 2 to estimate the mean, got T={T}")
        X = Y - Y.mean(axis=0)
    else:
        X = Y - np.asarray(mu, dtype=float).reshape(1, -1)
    S = X.T @ X / T
    S = 0.5 * (S + S.T)
    m = float(np.trace(S)) / n
    d2 = float(np.sum((S - m * np.eye(n)) ** 2)) / n
    # T^-2 sum_t ||x_t x_t^T - S||_F^2 = (sum_t ||x_t||^4 / T - ||S||_F^2) / T
    sq = np.sum(X * X, axis=1)
    b2_bar = (float(np.sum(sq * sq)) / T - float(np.sum(S * S))) / (T * n)
    if d2 <= 0.0:
        intensity = 1.0
    else:
        intensity = min(max(b2_bar / d2, 0.0), 1.0)
    matrix = (1.0 - intensity) * S
    matrix[np.diag_indices(n)] += intensity * m
    return ShrinkageEstimate(matrix, intensity, m)
