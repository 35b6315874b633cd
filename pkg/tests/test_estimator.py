import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from kroncov.estimator import (
    DegenerateTraceError,
    KroneckerCovEstimate,
    NotPSDWarning,
    SingularFactorError,
    fit,
    fit_data,
    kron_distance_sq,
    precision,
    quad_form_precision,
    sample_covariance,
    sample_covariance_known_mean,
    sample_mean,
)
from kroncov.tensorlin import invert_spd, kron_materialize, rotated_partial_trace, rotation_map

from conftest import random_spd

shapes = st.lists(st.integers(2, 4), min_size=1, max_size=3).filter(lambda d: np.prod(d) <= 64)


def random_estimate(rng, dims, sigma2=1.3):
    return KroneckerCovEstimate(sigma2, tuple(random_spd(rng, d) for d in dims), dims)


# -- moments ------------------------------------------------------------------------


def test_sample_mean_examples(rng):
    r = np.array([1.5, -2.0, 3.0])
    assert_array_equal(sample_mean([r, r]), r)
    assert_array_equal(sample_mean([[0, 0], [2, 4]]), [1, 2])
    Y = rng.standard_normal((3, 4))
    assert_allclose(sample_mean(Y), (Y[0] + Y[1] + Y[2]) / 3, rtol=1e-15)


def test_sample_covariance_examples():
    assert_array_equal(sample_covariance([[1, 2], [1, 2], [1, 2]]), np.zeros((2, 2)))
    assert_allclose(sample_covariance([[1, 0], [-1, 0]]), [[1, 0], [0, 0]])
    with pytest.raises(ValueError):
        sample_covariance([[1, 2]])


def test_known_mean_examples(rng):
    y = np.array([[0.3, -1.2]])
    assert_array_equal(sample_covariance_known_mean(y, y[0]), np.zeros((2, 2)))
    assert_allclose(sample_covariance_known_mean([[1, 0], [-1, 0]], [0, 0]), [[1, 0], [0, 0]])
    Y = rng.standard_normal((7, 3))
    assert_allclose(sample_covariance_known_mean(Y, Y.mean(axis=0)), sample_covariance(Y), atol=1e-15)
    with pytest.raises(ValueError):
        sample_covariance_known_mean(Y, np.zeros(2))


@settings(max_examples=40, deadline=None)
@given(T=st.integers(2, 20), n=st.integers(1, 6), seed=st.integers(0, 2**31))
def test_moment_decomposition(T, n, seed):
    rng = np.random.default_rng(seed)
    Y = rng.standard_normal((T, n)) + rng.standard_normal(n)
    mu = rng.standard_normal(n)
    d = Y.mean(axis=0) - mu
    assert_allclose(sample_covariance(Y), sample_covariance_known_mean(Y, mu) - np.outer(d, d), atol=1e-12)


# -- fit ----------------------------------------------------------------------------


def test_fit_identity():
    est = fit(np.eye(4), (2, 2))
    assert est.sigma2 == 1.0
    for F in est.factors:
        assert_allclose(F, np.eye(2))


def test_fit_exact_kronecker():
    A = np.array([[1, 0.5], [0.5, 1]])
    B = np.array([[1, -0.3], [-0.3, 1]])
    est = fit(2 * np.kron(A, B), (2, 2))
    assert est.sigma2 == pytest.approx(2.0, rel=1e-15)
    assert_allclose(est.factors[0], A, rtol=1e-14)
    assert_allclose(est.factors[1], B, rtol=1e-14, atol=1e-15)


def test_fit_diagonal_hand_values():
    est = fit(np.diag([1.0, 2.0, 3.0, 4.0]), "2x2")
    assert est.sigma2 == pytest.approx(2.5)
    assert_allclose(est.factors[0], np.diag([0.6, 1.4]), rtol=1e-14)
    assert_allclose(est.factors[1], np.diag([0.8, 1.2]), rtol=1e-14)


def test_fit_errors():
    with pytest.raises(DegenerateTraceError):
        fit(np.zeros((4, 4)), (2, 2))
    with pytest.raises(DegenerateTraceError):
        fit(np.diag([1.0, -1.0, 1.0, -1.0]), (2, 2), check_psd=False)
    with pytest.raises(ValueError):
        fit(np.eye(6), (2, 2))


def test_partial_traces_share_total_trace(rng):
    # every d^(h) has trace tr(M), so the total-trace check covers all factors
    X = rng.standard_normal((5, 12))
    M = X.T @ X
    for h in (1, 2, 3):
        assert np.trace(rotated_partial_trace(M, (2, 3, 2), h)) == pytest.approx(np.trace(M), rel=1e-13)


def test_fit_warns_on_indefinite_input():
    M = np.diag([3.0, 1.0, 2.0, -0.5])
    with pytest.warns(NotPSDWarning):
        est = fit(M, (2, 2))
    assert not est.psd_input
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        assert fit(np.eye(4), (2, 2)).psd_input


@settings(max_examples=60, deadline=None)
@given(dims=shapes, seed=st.integers(0, 2**31), s2=st.floats(0.01, 100))
def test_exact_identification(dims, seed, s2):
    rng = np.random.default_rng(seed)
    factors = [random_spd(rng, d) for d in dims]
    est = fit(kron_materialize(factors, s2), dims, check_psd=False)
    assert est.sigma2 == pytest.approx(s2, rel=1e-10)
    for F, G in zip(est.factors, factors):
        assert np.linalg.norm(F - G) <= 1e-10 * np.linalg.norm(G)


@settings(max_examples=60, deadline=None)
@given(dims=shapes, T=st.integers(1, 10), seed=st.integers(0, 2**31))
def test_trace_normalization_and_psd(dims, T, seed):
    rng = np.random.default_rng(seed)
    n = int(np.prod(dims))
    X = rng.standard_normal((T, n)) * rng.uniform(0.1, 3, n)
    est = fit(X.T @ X / T, dims)
    for F, d in zip(est.factors, dims):
        assert np.trace(F) == pytest.approx(d, rel=1e-12)
        assert_array_equal(F, F.T)
        lam = np.linalg.eigvalsh(F)
        assert lam[0] >= -1e-8 * lam[-1]


@settings(max_examples=40, deadline=None)
@given(dims=shapes, seed=st.integers(0, 2**31), c=st.floats(1e-3, 1e3))
def test_scale_equivariance(dims, seed, c):
    rng = np.random.default_rng(seed)
    n = int(np.prod(dims))
    X = rng.standard_normal((n + 2, n))
    M = X.T @ X
    a, b = fit(M, dims, check_psd=False), fit(c * M, dims, check_psd=False)
    assert b.sigma2 == pytest.approx(c * a.sigma2, rel=1e-12)
    for F, G in zip(a.factors, b.factors):
        assert_allclose(F, G, rtol=1e-10, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(n1=st.integers(2, 5), n2=st.integers(2, 5), seed=st.integers(0, 2**31))
def test_permutation_consistency(n1, n2, seed):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((3 * n1 * n2, n1 * n2))
    M = X.T @ X
    fwd = rotation_map((n1, n2), 2)
    a = fit(M, (n1, n2), check_psd=False)
    b = fit(M[np.ix_(fwd, fwd)], (n2, n1), check_psd=False)
    assert b.sigma2 == pytest.approx(a.sigma2, rel=1e-13)
    assert_allclose(b.factors[0], a.factors[1], rtol=1e-12, atol=1e-14)
    assert_allclose(b.factors[1], a.factors[0], rtol=1e-12, atol=1e-14)


def test_fit_data_means():
    Y = np.array([[1.0, 2.0, 0.0, 1.0], [3.0, 1.0, 2.0, 2.0], [0.0, 0.0, 1.0, 4.0]])
    assert fit_data(Y, (2, 2)).sigma2 == pytest.approx(np.trace(sample_covariance(Y)) / 4)
    assert fit_data(Y, (2, 2), mu=np.zeros(4)).sigma2 == pytest.approx(np.sum(Y**2) / 12)


# -- precision and quadratic forms ------------------------------------------------


def test_precision_examples(rng):
    ident = KroneckerCovEstimate(1.0, (np.eye(2), np.eye(3)), (2, 3))
    p = precision(ident)
    assert p.sigma2 == 1.0
    for F in p.factors:
        assert_allclose(F, np.eye(F.shape[0]))
    p = precision(KroneckerCovEstimate(2.0, (np.diag([0.5, 1.5]),), (2,)))
    assert p.sigma2 == 0.5
    assert_allclose(p.factors[0], np.diag([2.0, 2.0 / 3.0]), rtol=1e-15)
    est = random_estimate(rng, (2, 3, 2))
    assert_allclose(precision(est).materialize(), invert_spd(est.materialize()), atol=1e-9)


def test_precision_singular_factor():
    est = KroneckerCovEstimate(1.0, (np.eye(2), np.array([[1.0, 1.0], [1.0, 1.0]])), (2, 2))
    with pytest.raises(SingularFactorError) as info:
        precision(est)
    assert info.value.index == 1
    with pytest.raises(SingularFactorError):
        quad_form_precision(est, np.ones(4))


def test_quad_form_examples(rng):
    x = rng.standard_normal(6)
    ident = KroneckerCovEstimate(1.0, (np.eye(2), np.eye(3)), (2, 3))
    assert quad_form_precision(ident, x) == pytest.approx(x @ x, rel=1e-14)
    four = KroneckerCovEstimate(4.0, (np.eye(2), np.eye(3)), (2, 3))
    assert quad_form_precision(four, x) == pytest.approx(x @ x / 4, rel=1e-14)
    est = random_estimate(rng, (2, 3, 2), sigma2=0.4)
    x = rng.standard_normal(12)
    dense = x @ np.linalg.solve(est.materialize(), x)
    assert quad_form_precision(est, x) == pytest.approx(dense, rel=1e-10)


def test_kron_distance_matches_dense(rng):
    a = random_estimate(rng, (2, 3, 2), 1.1)
    b = random_estimate(rng, (2, 3, 2), 0.9)
    dense = np.sum((a.materialize() - b.materialize()) ** 2)
    assert kron_distance_sq(a, b) == pytest.approx(dense, rel=1e-10)
    assert kron_distance_sq(a, a) == pytest.approx(0.0, abs=1e-10)


# -- value type ---------------------------------------------------------------------


def test_estimate_validation():
    with pytest.raises(ValueError):
        KroneckerCovEstimate(1.0, (np.eye(2),), (2, 2))
    with pytest.raises(ValueError):
        KroneckerCovEstimate(1.0, (np.eye(3), np.eye(2)), (2, 2))
    with pytest.raises(ValueError):
        KroneckerCovEstimate(0.0, (np.eye(2),), (2,))


def test_json_round_trip(rng):
    est = random_estimate(rng, (2, 5, 2))
    back = KroneckerCovEstimate.from_json(est.to_json())
    assert back.shape == est.shape
    assert back.sigma2 == est.sigma2
    assert_array_equal(back.materialize(), est.materialize())
    d = est.to_dict()
    assert set(d) == {"shape", "sigma2", "factors"}
    assert d["shape"] == [2, 5, 2]
