import os

import numpy as np
import pytest


def pytest_collection_modifyitems(config, items):
    if os.environ.get("KRONCOV_LONGRUN") == "1":
        return
    skip = pytest.mark.skip(reason="long run; set KRONCOV_LONGRUN=1")
    for item in items:
        if "longrun" in item.keywords:
            item.add_marker(skip)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_spd(rng, d, normalize=True):
    A = rng.standard_normal((d, d))
    S = A @ A.T + d * np.eye(d)
    if normalize:
        S *= d / np.trace(S)
    return 0.5 * (S + S.T)


def commutation(m, n):
    """K with vec(A^T) = K vec(A) for A of shape (m, n), vec stacking columns."""
    K = np.zeros((m * n, m * n))
    for i in range(m):
        for j in range(n):
            # vec(A)[j*m + i] = A[i, j] = A^T[j, i] = vec(A^T)[i*n + j]
            K[i * n + j, j * m + i] = 1.0
    return K
