import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from conftest import random_dataset, random_nonsingular, random_theta
from lowrank_mcr.errors import ValidationError
from lowrank_mcr.model import (
    CoefVector,
    CvGrid,
    FactorParams,
    Family,
    MatrixDataset,
    ModelSpec,
    beta_of_theta,
    default_lambda_grid,
    design_row,
    effective_params,
    log_likelihood,
    objective_gradient,
    penalized_objective,
    penalty_value,
)


def test_design_row_examples():
    assert_array_equal(design_row(None, np.zeros((2, 2))), [1, 0, 0, 0, 0])
    assert_array_equal(design_row([5.0], [[1, 2], [3, 4]]), [1, 5, 1, 3, 2, 4])


def test_linear_predictor_double_sum(rng):
    data = random_dataset(rng, n=7, m=2, p=3, q=4)
    theta = random_theta(rng, m=2, p=3, q=4, r=2)
    eta = theta.a @ theta.b.T
    beta = beta_of_theta(theta).to_vector()
    for i in range(data.n):
        lit = theta.gamma + sum(theta.xi[k] * data.z[i, k] for k in range(2))
        lit += sum(eta[j, k] * data.mats[i, j, k] for j in range(3) for k in range(4))
        assert_allclose(design_row(data.z[i], data.mats[i]) @ beta, lit, rtol=1e-12)


def test_beta_of_theta_trivial():
    th = FactorParams(0.0, np.zeros(0), np.zeros((2, 1)), np.ones((3, 1)))
    assert_array_equal(beta_of_theta(th).eta_vec, np.zeros(6))
    th = FactorParams(1.0, np.zeros(0), np.array([[2.0]]), np.array([[3.0]]))
    assert_array_equal(beta_of_theta(th).eta_vec, [6.0])


@settings(max_examples=40)
@given(st.integers(0, 2**32 - 1), st.integers(1, 3))
def test_beta_reparametrization_invariance(seed, r):
    rng = np.random.default_rng(seed)
    th = random_theta(rng, m=1, p=4, q=3, r=r)
    c = random_nonsingular(rng, r)
    b1 = beta_of_theta(th).to_vector()
    b2 = beta_of_theta(th.reparametrize(c)).to_vector()
    assert_allclose(b2, b1, atol=1e-10 * max(1.0, np.abs(b1).max()))


def test_theta_vector_roundtrip(rng):
    th = random_theta(rng, m=2, p=4, q=3, r=2)
    back = FactorParams.from_vector(th.to_vector(), 2, 4, 3, 2)
    assert_array_equal(back.to_vector(), th.to_vector())
    with pytest.raises(ValidationError):
        FactorParams.from_vector(np.zeros(5), 2, 4, 3, 2)


def test_coef_vector_roundtrip(rng):
    eta = rng.standard_normal((3, 2))
    c = CoefVector.from_parts(1.5, [2.0, 3.0], eta)
    assert_array_equal(c.eta, eta)
    assert_array_equal(CoefVector.from_vector(c.to_vector(), 2, 3, 2).to_vector(), c.to_vector())


def test_effective_params_counts():
    assert effective_params(22, 15, 7, 3) == 80
    assert 1 + 22 + 15 * 7 == 128
    assert effective_params(0, 6, 6, 2) == 21
    assert effective_params(2, 3, 3, 3) == 1 + 2 + 9
    with pytest.raises(ValidationError):
        effective_params(0, 3, 3, 4)


def test_log_likelihood_trivial(rng):
    data = random_dataset(rng, n=10, m=1, p=2, q=2)
    beta = np.concatenate([[0.3, 0.1], rng.standard_normal(4)])
    perfect = data.with_response(data.design @ beta)
    assert log_likelihood(beta, perfect, "normal") == 0.0
    binary = random_dataset(rng, n=10, m=1, p=2, q=2, family="logistic")
    assert_allclose(log_likelihood(np.zeros(6), binary, "logistic"), -np.log(2), rtol=1e-15)


def test_log_likelihood_literal(rng):
    for family in ("normal", "logistic"):
        data = random_dataset(rng, n=15, m=2, p=2, q=3, family=family)
        beta = rng.standard_normal(data.dim)
        total = 0.0
        for i in range(data.n):
            u = float(design_row(data.z[i], data.mats[i]) @ beta)
            if family == "normal":
                total += -0.5 * (data.y[i] - u) ** 2
            else:
                total += data.y[i] * u - np.log(1 + np.exp(u))
        assert_allclose(log_likelihood(beta, data, family), total / data.n, rtol=1e-12)


def test_penalized_objective_cases(rng):
    data = random_dataset(rng, n=20)
    th = random_theta(rng)
    assert penalized_objective(th, data, "normal", 0.0) == log_likelihood(th, data, "normal")
    zero_a = FactorParams(th.gamma, th.xi, np.zeros_like(th.a), th.b)
    assert penalty_value(zero_a, 3.0) == 0.0
    with pytest.raises(ValidationError):
        penalized_objective(th, data, "normal", -1.0)


def test_penalty_not_reparametrization_invariant(rng):
    data = random_dataset(rng, n=20)
    th = random_theta(rng)
    c = np.diag([3.0, 0.5])
    th2 = th.reparametrize(c)
    assert_allclose(log_likelihood(th2, data, "normal"), log_likelihood(th, data, "normal"),
                    rtol=1e-12)
    assert abs(penalty_value(th2, 1.0) - penalty_value(th, 1.0)) > 1e-3


def _fd_gradient(theta, data, family, lam, h=1e-6):
    v = theta.to_vector()
    m, p, q, r = theta.m, theta.p, theta.q, theta.r
    g = np.empty_like(v)
    for k in range(v.size):
        e = np.zeros_like(v)
        e[k] = h
        up = penalized_objective(FactorParams.from_vector(v + e, m, p, q, r), data, family, lam)
        dn = penalized_objective(FactorParams.from_vector(v - e, m, p, q, r), data, family, lam)
        g[k] = (up - dn) / (2 * h)
    return g


@pytest.mark.parametrize("family", ["normal", "logistic"])
def test_objective_gradient_matches_finite_differences(rng, family):
    for _ in range(5):
        data = random_dataset(rng, n=40, m=2, p=3, q=4, family=family)
        th = random_theta(rng, m=2, p=3, q=4, r=2, scale=0.7)
        g = objective_gradient(th, data, family, 0.2)
        fd = _fd_gradient(th, data, family, 0.2)
        assert np.linalg.norm(g - fd) <= 1e-5 * max(1.0, np.linalg.norm(fd))


def test_dataset_validation(rng):
    with pytest.raises(ValidationError):
        MatrixDataset(y=np.zeros(3), mats=np.zeros((4, 2, 2)))
    with pytest.raises(ValidationError):
        MatrixDataset(y=np.array([0.0, np.inf]), mats=np.zeros((2, 2, 2)))
    with pytest.raises(ValidationError):
        MatrixDataset(y=np.zeros(2), mats=np.zeros((2, 2, 2)), z=np.zeros((3, 1)))
    data = MatrixDataset(y=np.array([0.0, 2.0]), mats=np.zeros((2, 2, 2)))
    assert data.m == 0 and data.z.shape == (2, 0)
    with pytest.raises(ValidationError, match="row 2"):
        data.check_family(Family.LOGISTIC)


def test_sufficient_statistics(rng):
    data = random_dataset(rng, n=30)
    x = data.design
    assert_allclose(data.gram, x.T @ x / data.n, rtol=1e-12)
    assert_allclose(data.xty, x.T @ data.y / data.n, rtol=1e-12)


def test_spec_validation():
    with pytest.raises(ValidationError):
        ModelSpec("normal", 0)
    with pytest.raises(ValidationError):
        ModelSpec("normal", 1, penalty=-0.1)
    with pytest.raises(ValidationError):
        ModelSpec("poisson", 1)
    with pytest.raises(ValidationError):
        CvGrid(candidates=())
    spec = ModelSpec("normal", 3, penalty=0.1)
    with pytest.raises(ValidationError):
        spec.check_data(MatrixDataset(y=np.zeros(4), mats=np.zeros((4, 2, 5))))


def test_default_grid_arithmetic():
    grid = default_lambda_grid(80, 400)
    assert_allclose(grid, [0.01, 0.2, 80 / (20 * np.log(400))], rtol=1e-14)
    assert_allclose(grid[2], 0.6676164013906681, rtol=1e-12)


def test_default_grid_satisfies_rate_condition():
    for s_r in (21, 80):
        scaled = np.array([[lam * np.sqrt(n) for lam in default_lambda_grid(s_r, n)]
                           for n in (100, 400, 1600, 6400)])
        assert np.all(np.diff(scaled, axis=0) < 0)
