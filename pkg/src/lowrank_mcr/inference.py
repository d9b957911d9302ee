"""Asymptotic covariance of ``beta_hat`` and Wald intervals.

``beta(theta)`` is over-parameterized, so the covariance of ``beta_hat`` is
the sandwich ``D H^+ D' V D H^+ D'`` with ``D`` the Jacobian of
``beta(theta)``, ``V`` the per-observation information and
``H = D'(V + lam I)D``.  The pseudoinverse absorbs the ``r^2``-dimensional
null space created by the ``(A C, B C^{-T})`` reparametrizations.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import expit
from scipy.stats import norm

from .errors import DegenerateCovarianceError, ValidationError
from .model import CoefVector, FactorParams, Family, MatrixDataset, linear_predictor
from .numkit import DEFAULT_PINV_RTOL, commutation_matrix, kron, pinv

NEG_DIAG_TOL = 1e-10


@dataclass(frozen=True, eq=False)
class SandwichCovariance:
    """Sandwich covariance of ``sqrt(n) (beta_hat - beta)``.

    ``eta_block`` is the trailing ``pq x pq`` principal block.
    """

    matrix: np.ndarray
    n_eta: int
    lambda_used: float
    pinv_rel_tol: float = DEFAULT_PINV_RTOL

    @property
    def eta_block(self) -> np.ndarray:
        k = self.matrix.shape[0] - self.n_eta
        return self.matrix[k:, k:]

    def diagonal(self) -> np.ndarray:
        """Diagonal with round-off negatives clamped to zero."""
        d = np.diag(self.matrix).copy()
        scale = max(1.0, float(np.max(np.abs(d)))) if d.size else 1.0
        worst = float(d.min()) if d.size else 0.0
        if worst < -NEG_DIAG_TOL * scale:
            raise DegenerateCovarianceError(
                f"covariance diagonal entry {worst:.3e} is negative beyond round-off; "
                "check the pseudoinverse tolerance"
            )
        return np.clip(d, 0.0, None)

    def standard_errors(self, n: int) -> np.ndarray:
        return np.sqrt(self.diagonal() / n)


def jacobian_delta(theta: FactorParams) -> np.ndarray:
    """Jacobian of ``beta(theta)`` with respect to ``(gamma, xi, vec A, vec B)``."""
    m, p, q, r = theta.m, theta.p, theta.q, theta.r
    d = np.zeros((1 + m + p * q, 1 + m + (p + q) * r))
    d[:1 + m, :1 + m] = np.eye(1 + m)
    d[1 + m:, 1 + m:1 + m + p * r] = kron(theta.b, np.eye(p))
    d[1 + m:, 1 + m + p * r:] = kron(np.eye(q), theta.a) @ commutation_matrix(q, r)
    return d


def numerical_rank(mat: np.ndarray, rel_tol: float = 1e-8) -> int:
    sv = np.linalg.svd(mat, compute_uv=False)
    if sv.size == 0 or sv[0] == 0:
        return 0
    return int(np.sum(sv > rel_tol * sv[0]))


def sigma_sq_hat(data: MatrixDataset, beta_hat, s_r: int) -> float:
    """Residual variance with ``n - s_r`` degrees of freedom."""
    if data.n <= s_r:
        raise ValidationError(
            f"n = {data.n} does not exceed s_r = {s_r}; residual variance is undefined"
        )
    resid = data.y - linear_predictor(beta_hat, data)
    return float(resid @ resid / (data.n - s_r))


def logistic_weights(u: np.ndarray) -> np.ndarray:
    """``e^u / (1 + e^u)^2``, evaluated without overflow."""
    mu = expit(u)
    return mu * (1.0 - mu)


def v_hat(data: MatrixDataset, theta_hat, family, sigma_sq=None) -> np.ndarray:
    family = Family.parse(family)
    x = data.design
    if family is Family.NORMAL:
        if sigma_sq is None or sigma_sq <= 0:
            raise DegenerateCovarianceError(
                f"normal-family information needs a positive variance, got {sigma_sq}"
            )
        v = data.gram / sigma_sq
    else:
        w = logistic_weights(linear_predictor(theta_hat, data))
        v = (x.T * w) @ x / data.n
    return 0.5 * (v + v.T)


def sandwich_sigma(delta_hat: np.ndarray, v: np.ndarray, lam: float,
                   rel_tol: float = DEFAULT_PINV_RTOL, n_eta=None) -> SandwichCovariance:
    if lam < 0:
        raise ValidationError("lambda must be >= 0")
    k = v.shape[0]
    if delta_hat.shape[0] != k:
        raise ValidationError("Jacobian and information matrix have different row counts")
    vd = v @ delta_hat
    h = delta_hat.T @ vd + lam * (delta_hat.T @ delta_hat)
    outer = delta_hat @ pinv(h, rel_tol, hermitian=True)
    sigma = outer @ (delta_hat.T @ vd) @ outer.T
    sigma = 0.5 * (sigma + sigma.T)
    return SandwichCovariance(sigma, k if n_eta is None else n_eta, float(lam), rel_tol)


def sandwich_for_fit(data: MatrixDataset, theta_hat: FactorParams, beta_hat: CoefVector,
                     family, lam: float, s_r: int, rel_tol: float = DEFAULT_PINV_RTOL,
                     check_rank: bool = True):
    """Sandwich covariance (and normal-family variance) for a fitted model.

    With ``check_rank`` a :class:`RuntimeWarning` is issued when the
    numerical rank of the Jacobian differs from ``s_r``.
    """
    family = Family.parse(family)
    delta = jacobian_delta(theta_hat)
    rank = numerical_rank(delta) if check_rank else s_r
    if rank != s_r:
        warnings.warn(
            f"Jacobian rank {rank} differs from s_r = {s_r}; the fitted point may not be "
            "regular and the covariance estimate may be unreliable",
            RuntimeWarning,
            stacklevel=3,
        )
    sigma_sq = sigma_sq_hat(data, beta_hat, s_r) if family is Family.NORMAL else None
    v = v_hat(data, theta_hat, family, sigma_sq)
    cov = sandwich_sigma(delta, v, lam, rel_tol, n_eta=data.p * data.q)
    return cov, sigma_sq


def confidence_interval(beta_hat, sigma: SandwichCovariance, j: int, alpha: float, n: int):
    """Normal-quantile interval for coordinate ``j`` (0-based) of ``beta``."""
    if not 0 < alpha < 1:
        raise ValidationError("alpha must lie in (0, 1)")
    b = beta_hat.to_vector() if isinstance(beta_hat, CoefVector) else np.asarray(beta_hat)
    half = norm.ppf(1 - alpha / 2) / np.sqrt(n) * np.sqrt(sigma.diagonal()[j])
    return float(b[j] - half), float(b[j] + half)


def confidence_intervals(beta_hat, sigma: SandwichCovariance, alpha: float, n: int) -> np.ndarray:
    """All intervals at once, shape ``(len(beta), 2)``."""
    b = beta_hat.to_vector() if isinstance(beta_hat, CoefVector) else np.asarray(beta_hat)
    half = norm.ppf(1 - alpha / 2) / np.sqrt(n) * np.sqrt(sigma.diagonal())
    return np.column_stack([b - half, b + half])
