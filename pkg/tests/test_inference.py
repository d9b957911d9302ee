import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from conftest import random_dataset, random_nonsingular, random_theta
from lowrank_mcr.errors import DegenerateCovarianceError, ValidationError
from lowrank_mcr.estimator import fit_alternating
from lowrank_mcr.inference import (
    SandwichCovariance,
    confidence_interval,
    confidence_intervals,
    jacobian_delta,
    numerical_rank,
    sandwich_sigma,
    sigma_sq_hat,
    v_hat,
)
from lowrank_mcr.model import (
    CoefVector,
    FactorParams,
    MatrixDataset,
    ModelSpec,
    beta_of_theta,
    effective_params,
)


def _fd_jacobian(theta, h=1e-6):
    v = theta.to_vector()
    m, p, q, r = theta.m, theta.p, theta.q, theta.r
    cols = []
    for k in range(v.size):
        e = np.zeros_like(v)
        e[k] = h
        up = beta_of_theta(FactorParams.from_vector(v + e, m, p, q, r)).to_vector()
        dn = beta_of_theta(FactorParams.from_vector(v - e, m, p, q, r)).to_vector()
        cols.append((up - dn) / (2 * h))
    return np.column_stack(cols)


def test_jacobian_scalar_case():
    th = FactorParams(0.0, np.zeros(0), np.array([[2.0]]), np.array([[5.0]]))
    assert_array_equal(jacobian_delta(th)[1], [0.0, 5.0, 2.0])


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_jacobian_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    th = random_theta(rng, m=2, p=4, q=3, r=2)
    assert np.max(np.abs(jacobian_delta(th) - _fd_jacobian(th))) <= 1e-6


def test_jacobian_rank_generic(rng):
    for m, p, q, r in [(2, 4, 3, 2), (0, 6, 6, 2), (1, 5, 5, 3), (0, 3, 3, 3)]:
        th = random_theta(rng, m=m, p=p, q=q, r=r)
        assert numerical_rank(jacobian_delta(th)) == effective_params(m, p, q, r)


def test_sigma_sq_hat_cases(rng):
    mats = np.zeros((4, 1, 1))
    data = MatrixDataset(y=np.array([1.0, -1.0, 1.0, -1.0]), mats=mats)
    zero = CoefVector(0.0, np.zeros(0), np.zeros(1), 1, 1)
    assert sigma_sq_hat(data, zero, 2) == 2.0
    assert sigma_sq_hat(data.with_response(np.zeros(4)), zero, 2) == 0.0
    with pytest.raises(ValidationError):
        sigma_sq_hat(data, zero, 4)


def test_sigma_sq_hat_monte_carlo():
    rng = np.random.default_rng(11)
    vals = []
    for _ in range(200):
        eta = rng.standard_normal((3, 2)) @ rng.standard_normal((2, 3)) * 0.5
        data = random_dataset(rng, n=80, m=1, p=3, q=3, eta=eta, noise=1.0)
        res = fit_alternating(data, ModelSpec("normal", 2, 0.0), 0.0, with_covariance=False)
        vals.append(sigma_sq_hat(data, res.beta_hat, res.s_r))
    assert abs(np.mean(vals) - 1.0) <= 0.05


def test_v_hat_cases(rng):
    n = 6
    data = MatrixDataset(y=np.arange(n, dtype=float), mats=np.zeros((n, 1, 2)))
    th = FactorParams(0.0, np.zeros(0), np.zeros((1, 1)), np.zeros((2, 1)))
    v = v_hat(data, th, "normal", 1.0)
    expected = np.zeros((3, 3))
    expected[0, 0] = 1.0
    assert_array_equal(v, expected)
    binary = random_dataset(rng, n=30, m=1, p=2, q=2, family="logistic")
    th = FactorParams(0.0, np.zeros(1), np.zeros((2, 1)), np.zeros((2, 1)))
    x = binary.design
    assert_allclose(v_hat(binary, th, "logistic"), 0.25 * x.T @ x / 30, rtol=1e-12)
    with pytest.raises(DegenerateCovarianceError):
        v_hat(data, th, "normal", 0.0)


def test_v_hat_psd(rng):
    for family in ("normal", "logistic"):
        data = random_dataset(rng, n=40, family=family)
        v = v_hat(data, random_theta(rng), family, 1.3)
        assert_allclose(v, v.T, atol=1e-10)
        assert np.linalg.eigvalsh(v).min() >= -1e-10


def test_sandwich_identity_jacobian(rng):
    g = rng.standard_normal((4, 4))
    v = g @ g.T + np.eye(4)
    cov = sandwich_sigma(np.eye(4), v, 0.0)
    assert_allclose(cov.matrix, np.linalg.inv(v), rtol=1e-9, atol=1e-12)


def test_sandwich_symmetric_and_psd_diagonal(rng):
    for _ in range(20):
        th = random_theta(rng, m=1, p=3, q=3, r=2)
        g = rng.standard_normal((11, 11))
        cov = sandwich_sigma(jacobian_delta(th), g @ g.T, float(rng.uniform(0, 0.5)))
        assert_allclose(cov.matrix, cov.matrix.T, atol=1e-10)
        assert np.diag(cov.matrix).min() >= -1e-10


def test_sandwich_invariant_to_factorization(rng):
    th = random_theta(rng, m=1, p=3, q=4, r=2)
    g = rng.standard_normal((14, 14))
    v = g @ g.T
    c = random_nonsingular(rng, 2)
    s1 = sandwich_sigma(jacobian_delta(th), v, 0.0).matrix
    s2 = sandwich_sigma(jacobian_delta(th.reparametrize(c)), v, 0.0).matrix
    assert_allclose(s2, s1, atol=1e-7 * np.abs(s1).max())


def test_diagonal_clamps_roundoff_and_rejects_real_negatives():
    cov = SandwichCovariance(np.diag([1.0, -1e-13]), 1, 0.0)
    assert_array_equal(cov.diagonal(), [1.0, 0.0])
    with pytest.raises(DegenerateCovarianceError):
        SandwichCovariance(np.diag([1.0, -1e-3]), 1, 0.0).diagonal()


def test_confidence_interval_arithmetic():
    cov = SandwichCovariance(np.diag([4.0, 0.0]), 1, 0.0)
    lo, hi = confidence_interval(np.array([1.0, 2.0]), cov, 0, 0.05, 100)
    assert_allclose([lo, hi], [1 - 1.959963984540054 * 0.2, 1 + 1.959963984540054 * 0.2])
    assert confidence_interval(np.array([1.0, 2.0]), cov, 1, 0.05, 100) == (2.0, 2.0)
    both = confidence_intervals(np.array([1.0, 2.0]), cov, 0.05, 100)
    assert_allclose(both[0], [lo, hi])
    with pytest.raises(ValidationError):
        confidence_interval(np.zeros(2), cov, 0, 1.5, 100)


def test_fit_attaches_covariance(rng):
    data = random_dataset(rng, n=150, m=1, p=3, q=3)
    res = fit_alternating(data, ModelSpec("normal", 2, 0.01), 0.01)
    assert res.covariance.matrix.shape == (data.dim, data.dim)
    assert res.covariance.eta_block.shape == (9, 9)
    assert res.sigma_sq_hat > 0
    assert res.sigma_hat is res.covariance.matrix
