import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays
from numpy.testing import assert_allclose, assert_array_equal

from lowrank_mcr.errors import ValidationError
from lowrank_mcr.numkit import (
    commutation_matrix,
    fix_signs,
    frobenius_norm_sq,
    kron,
    leading_right_singular_vectors,
    pinv,
    unvec,
    vec,
)

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


def test_vec_is_column_stacking():
    assert_array_equal(vec([[1, 2], [3, 4]]), [1, 3, 2, 4])
    assert_array_equal(vec(np.zeros((3, 2))), np.zeros(6))


@given(arrays(float, st.tuples(st.integers(1, 5), st.integers(1, 5)), elements=finite))
def test_vec_unvec_roundtrip(m):
    assert_array_equal(unvec(vec(m), *m.shape), m)


def test_vec_rejects_nonfinite():
    with pytest.raises(ValidationError):
        vec([[1.0, np.nan]])


def test_unvec_length_mismatch():
    with pytest.raises(ValidationError):
        unvec(np.arange(5.0), 2, 3)


def test_commutation_small_cases():
    assert_array_equal(commutation_matrix(2, 1), np.eye(2))
    b = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert_array_equal(commutation_matrix(2, 2) @ vec(b), [1, 2, 3, 4])


def test_commutation_defining_identity(rng):
    k = commutation_matrix(3, 2)
    assert_array_equal(k.sum(axis=0), np.ones(6))
    assert_array_equal(k.sum(axis=1), np.ones(6))
    for _ in range(50):
        b = rng.standard_normal((3, 2))
        assert_array_equal(k @ vec(b), vec(b.T))


def test_kron_identities(rng):
    assert_array_equal(kron(np.eye(2), np.eye(3)), np.eye(6))
    b = rng.standard_normal((3, 4))
    assert_array_equal(kron([[2.0]], b), 2 * b)


@settings(max_examples=30)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4), st.integers(1, 4),
       st.integers(0, 2**32 - 1))
def test_kron_vec_identity(ra, ca, rb, cb, seed):
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal((ra, ca)), rng.standard_normal((rb, cb))
    x = rng.standard_normal((cb, ca))
    assert_allclose(kron(a, b) @ vec(x), vec(b @ x @ a.T), atol=1e-12)


def test_pinv_diagonal():
    assert_array_equal(pinv(np.diag([2.0, 0.0])), np.diag([0.5, 0.0]))
    assert_array_equal(pinv(np.zeros((3, 2))), np.zeros((2, 3)))


def test_pinv_matches_inverse(rng):
    for _ in range(20):
        s = rng.standard_normal((5, 5)) + 5 * np.eye(5)
        assert_allclose(pinv(s), np.linalg.solve(s, np.eye(5)), atol=1e-10)


def test_pinv_penrose_conditions(rng):
    for _ in range(20):
        s = rng.standard_normal((6, 3)) @ rng.standard_normal((3, 5))
        ps = pinv(s)
        assert_allclose(s @ ps @ s, s, atol=1e-8)
        assert_allclose(ps @ s @ ps, ps, atol=1e-8)
        assert_allclose((s @ ps).T, s @ ps, atol=1e-8)


def test_fix_signs():
    v = np.array([[0.0, -1.0], [-2.0, 3.0]])
    out = fix_signs(v)
    assert_array_equal(out, [[0.0, 1.0], [2.0, -3.0]])


def test_leading_singular_vectors_diagonal():
    v = leading_right_singular_vectors(np.diag([3.0, 1.0]), 1)
    assert_allclose(np.abs(v[:, 0]), [1.0, 0.0])


def test_leading_singular_vectors_rank_one(rng):
    u, w = rng.standard_normal(4), rng.standard_normal(3)
    v = leading_right_singular_vectors(np.outer(u, w), 1)[:, 0]
    assert_allclose(abs(v @ w) / np.linalg.norm(w), 1.0, atol=1e-12)


def test_leading_singular_vectors_orthonormal(rng):
    v = leading_right_singular_vectors(rng.standard_normal((5, 4)), 4)
    assert_allclose(v.T @ v, np.eye(4), atol=1e-10)


def test_leading_singular_vectors_rank_checks():
    with pytest.raises(ValidationError):
        leading_right_singular_vectors(np.eye(3), 4)


def test_frobenius(rng):
    assert frobenius_norm_sq(np.zeros((2, 2))) == 0.0
    assert frobenius_norm_sq([[3.0, 4.0]]) == 25.0
    m = rng.standard_normal((4, 3))
    assert_allclose(frobenius_norm_sq(m), np.trace(m.T @ m), rtol=1e-13)
