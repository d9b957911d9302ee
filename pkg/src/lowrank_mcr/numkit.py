"""Dense matrix helpers shared by the estimator, inference and test code.

Every flattening in this package is column-major: ``vec(M)[(k - 1) p + j]``
holds ``M[j, k]`` (1-based).  Files, Jacobians and design vectors all rely
on it.
"""

from __future__ import annotations

import numpy as np

from .errors import ValidationError

DEFAULT_PINV_RTOL = 1e-8


def _finite_2d(m, name: str = "matrix") -> np.ndarray:
    arr = np.asarray(m, dtype=float)
    if arr.ndim != 2:
        raise ValidationError(f"{name} must be 2-dimensional, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} contains non-finite entries")
    return arr


def vec(m) -> np.ndarray:
    """Stack the columns of ``m`` into one long vector."""
    arr = _finite_2d(m)
    return arr.reshape(-1, order="F")


def unvec(v, p: int, q: int) -> np.ndarray:
    """Inverse of :func:`vec` for a ``p x q`` matrix."""
    v = np.asarray(v, dtype=float)
    if v.size != p * q:
        raise ValidationError(f"cannot reshape length {v.size} into {p}x{q}")
    return v.reshape((p, q), order="F")


def commutation_matrix(q: int, r: int) -> np.ndarray:
    """Return ``K`` with ``K @ vec(B) == vec(B.T)`` for every ``q x r`` matrix ``B``."""
    if q < 1 or r < 1:
        raise ValidationError(f"commutation matrix needs q, r >= 1, got ({q}, {r})")
    # vec(B.T)[k + j*r] = B[j, k] = vec(B)[j + k*q]
    j, k = np.meshgrid(np.arange(q), np.arange(r), indexing="ij")
    K = np.zeros((q * r, q * r))
    K[(k + j * r).ravel(), (j + k * q).ravel()] = 1.0
    return K


def kron(a, b) -> np.ndarray:
    """Kronecker product of two finite matrices."""
    return np.kron(_finite_2d(a, "a"), _finite_2d(b, "b"))


def pinv(s, rel_tol: float = DEFAULT_PINV_RTOL, hermitian: bool = False) -> np.ndarray:
    """Moore-Penrose pseudoinverse through the SVD.

    Singular values at or below ``rel_tol * s_max`` are treated as zero.
    An all-zero input gives an all-zero result.  With ``hermitian=True``
    the (symmetric) input is decomposed by ``eigh``, which is cheaper and
    gives the same result up to round-off.
    """
    if rel_tol <= 0:
        raise ValidationError("rel_tol must be positive")
    arr = _finite_2d(s)
    if arr.size == 0:
        return arr.T.copy()
    if hermitian:
        if arr.shape[0] != arr.shape[1]:
            raise ValidationError(f"hermitian pinv needs a square matrix, got {arr.shape}")
        w, v = np.linalg.eigh(0.5 * (arr + arr.T))
        top = np.abs(w).max()
        if top == 0.0:
            return np.zeros(arr.shape)
        keep = np.abs(w) > rel_tol * top
        return (v[:, keep] / w[keep]) @ v[:, keep].T
    u, sv, vt = np.linalg.svd(arr, full_matrices=False)
    if sv[0] == 0.0:
        return np.zeros(arr.T.shape)
    keep = sv > rel_tol * sv[0]
    inv = np.zeros_like(sv)
    inv[keep] = 1.0 / sv[keep]
    return (vt.T * inv) @ u.T


def fix_signs(v: np.ndarray, tiny: float = 1e-12) -> np.ndarray:
    """Flip columns so the first entry with magnitude above ``tiny`` is positive."""
    v = np.array(v, dtype=float, copy=True)
    for col in range(v.shape[1]):
        idx = np.flatnonzero(np.abs(v[:, col]) > tiny)
        if idx.size and v[idx[0], col] < 0:
            v[:, col] = -v[:, col]
    return v


def leading_right_singular_vectors(m, r: int) -> np.ndarray:
    """Top-``r`` right singular vectors of ``m`` as the columns of a ``q x r`` matrix.

    Columns are ordered by decreasing singular value.  When ``m`` has rank
    below ``r`` the trailing columns still come from the full orthonormal
    basis returned by the SVD.  Signs follow :func:`fix_signs` so the output
    is deterministic.
    """
    arr = _finite_2d(m)
    p, q = arr.shape
    if not 1 <= r <= min(p, q):
        raise ValidationError(f"need 1 <= r <= min(p, q) = {min(p, q)}, got r={r}")
    _, _, vt = np.linalg.svd(arr, full_matrices=True)
    return fix_signs(vt[:r].T)


def frobenius_norm_sq(m) -> float:
    arr = np.asarray(m, dtype=float)
    return float(np.sum(arr * arr))
