"""Data model, design vectors, the beta(theta) map and likelihood evaluation.

The rank-r model links a response to ``gamma + xi' z + <A B', M>``.  The
factor parameters ``theta = (gamma, xi, vec(A), vec(B))`` are not
identifiable, only ``beta = (gamma, xi, vec(A B'))`` is.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import TYPE_CHECKING, Optional, Union

import numpy as np
from scipy.special import expit

from .errors import ValidationError
from .numkit import frobenius_norm_sq, vec

if TYPE_CHECKING:
    from .inference import SandwichCovariance


class Family(str, enum.Enum):
    NORMAL = "normal"
    LOGISTIC = "logistic"

    @classmethod
    def parse(cls, value: Union[str, "Family"]) -> "Family":
        if isinstance(value, Family):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ValidationError(
                f"unknown family {value!r}; expected 'normal' or 'logistic'"
            ) from None


# cached attributes that depend on (z, mats) only
DESIGN_CACHE_KEYS = ("vec_mats", "design", "gram", "base_design", "normal_profile")


@dataclass(frozen=True, eq=False)
class MatrixDataset:
    """``n`` observations of (response, confounders, p x q matrix covariate).

    ``z`` always has shape ``(n, m)``; ``m == 0`` means no confounders.
    """

    y: np.ndarray
    mats: np.ndarray
    z: Optional[np.ndarray] = None

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float).reshape(-1)
        mats = np.asarray(self.mats, dtype=float)
        if mats.ndim != 3:
            raise ValidationError(f"mats must have shape (n, p, q), got {mats.shape}")
        n = y.shape[0]
        if n < 1:
            raise ValidationError("dataset needs at least one observation")
        if mats.shape[0] != n:
            raise ValidationError(
                f"{mats.shape[0]} covariate matrices for {n} responses"
            )
        if self.z is None:
            z = np.zeros((n, 0))
        else:
            z = np.asarray(self.z, dtype=float)
            if z.ndim == 1:
                z = z.reshape(n, -1) if z.size else np.zeros((n, 0))
            if z.shape[0] != n:
                raise ValidationError(f"confounders have {z.shape[0]} rows, expected {n}")
        for name, arr in (("y", y), ("mats", mats), ("z", z)):
            if not np.all(np.isfinite(arr)):
                raise ValidationError(f"{name} contains non-finite values")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "mats", mats)
        object.__setattr__(self, "z", z)

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def m(self) -> int:
        return self.z.shape[1]

    @property
    def p(self) -> int:
        return self.mats.shape[1]

    @property
    def q(self) -> int:
        return self.mats.shape[2]

    @property
    def dim(self) -> int:
        """Length of the design vector, ``1 + m + pq``."""
        return 1 + self.m + self.p * self.q

    @cached_property
    def vec_mats(self) -> np.ndarray:
        """``(n, pq)`` array whose i-th row is ``vec(M_i)``."""
        return self.mats.transpose(0, 2, 1).reshape(self.n, self.p * self.q)

    @cached_property
    def design(self) -> np.ndarray:
        """``(n, 1 + m + pq)`` array whose i-th row is ``X_i``."""
        return np.hstack([np.ones((self.n, 1)), self.z, self.vec_mats])

    @cached_property
    def gram(self) -> np.ndarray:
        """``X'X / n``."""
        x = self.design
        return x.T @ x / self.n

    @cached_property
    def xty(self) -> np.ndarray:
        """``X'y / n``."""
        return self.design.T @ self.y / self.n

    @cached_property
    def base_design(self) -> np.ndarray:
        """``(n, 1 + m)`` intercept and confounder columns."""
        return np.hstack([np.ones((self.n, 1)), self.z])

    def check_family(self, family: Family) -> None:
        if Family.parse(family) is Family.LOGISTIC:
            bad = np.flatnonzero((self.y != 0.0) & (self.y != 1.0))
            if bad.size:
                raise ValidationError(
                    f"logistic response must be 0/1; row {bad[0] + 1} has {float(self.y[bad[0]])!r}"
                )

    def with_response(self, y) -> "MatrixDataset":
        """Same design, new response; design-only caches are shared."""
        out = MatrixDataset(y=y, mats=self.mats, z=self.z)
        for key in DESIGN_CACHE_KEYS:
            if key in self.__dict__:
                out.__dict__[key] = self.__dict__[key]
        return out

    def subset(self, idx) -> "MatrixDataset":
        idx = np.asarray(idx)
        return MatrixDataset(y=self.y[idx], mats=self.mats[idx], z=self.z[idx])

    def permute_mats(self, perm) -> "MatrixDataset":
        return MatrixDataset(y=self.y, mats=self.mats[np.asarray(perm)], z=self.z)


@dataclass(frozen=True)
class CvGrid:
    """Cross-validation grid for the penalty.

    ``candidates=None`` means the default grid
    ``{s_r / n**1.5, s_r / n, s_r / (sqrt(n) log n)}``.
    """

    candidates: Optional[tuple] = None
    folds: int = 5

    def __post_init__(self):
        if self.candidates is not None:
            cands = tuple(float(c) for c in self.candidates)
            if not cands or any(c < 0 or not np.isfinite(c) for c in cands):
                raise ValidationError("CV candidates must be a nonempty list of finite lambda >= 0")
            object.__setattr__(self, "candidates", cands)
        if self.folds < 2:
            raise ValidationError("CV needs at least 2 folds")

    def resolve(self, s_r: int, n: int) -> tuple:
        if self.candidates is not None:
            return self.candidates
        return default_lambda_grid(s_r, n)


def default_lambda_grid(s_r: int, n: int) -> tuple:
    return (s_r / n**1.5, s_r / n, s_r / (math.sqrt(n) * math.log(n)))


@dataclass(frozen=True)
class ModelSpec:
    family: Family
    rank: int
    penalty: Union[float, CvGrid] = field(default_factory=CvGrid)
    max_outer_iters: int = 200
    beta_rel_tol: float = 1e-6
    ridge_eps: Optional[float] = None
    pinv_rel_tol: float = 1e-8

    def __post_init__(self):
        object.__setattr__(self, "family", Family.parse(self.family))
        if self.rank < 1:
            raise ValidationError(f"rank must be >= 1, got {self.rank}")
        if not isinstance(self.penalty, CvGrid):
            lam = float(self.penalty)
            if lam < 0 or not np.isfinite(lam):
                raise ValidationError(f"lambda must be finite and >= 0, got {self.penalty}")
            object.__setattr__(self, "penalty", lam)
        if self.max_outer_iters < 1:
            raise ValidationError("max_outer_iters must be positive")
        if self.beta_rel_tol <= 0:
            raise ValidationError("beta_rel_tol must be positive")
        if self.ridge_eps is not None and self.ridge_eps <= 0:
            raise ValidationError("ridge_eps must be positive")

    def check_data(self, data: MatrixDataset) -> None:
        if self.rank > min(data.p, data.q):
            raise ValidationError(
                f"rank {self.rank} exceeds min(p, q) = {min(data.p, data.q)}"
            )
        data.check_family(self.family)


@dataclass(frozen=True, eq=False)
class FactorParams:
    """``theta = (gamma, xi, A, B)`` with ``A`` p x r and ``B`` q x r."""

    gamma: float
    xi: np.ndarray
    a: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        xi = np.asarray(self.xi, dtype=float).reshape(-1)
        a = np.atleast_2d(np.asarray(self.a, dtype=float))
        b = np.atleast_2d(np.asarray(self.b, dtype=float))
        if a.shape[1] != b.shape[1]:
            raise ValidationError(f"A has {a.shape[1]} columns but B has {b.shape[1]}")
        if not (np.isfinite(self.gamma) and np.all(np.isfinite(xi))
                and np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
            raise ValidationError("factor parameters must be finite")
        object.__setattr__(self, "gamma", float(self.gamma))
        object.__setattr__(self, "xi", xi)
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)

    @property
    def m(self) -> int:
        return self.xi.shape[0]

    @property
    def p(self) -> int:
        return self.a.shape[0]

    @property
    def q(self) -> int:
        return self.b.shape[0]

    @property
    def r(self) -> int:
        return self.a.shape[1]

    @property
    def eta(self) -> np.ndarray:
        return self.a @ self.b.T

    def to_vector(self) -> np.ndarray:
        return np.concatenate([[self.gamma], self.xi, vec(self.a), vec(self.b)])

    @classmethod
    def from_vector(cls, theta, m: int, p: int, q: int, r: int) -> "FactorParams":
        theta = np.asarray(theta, dtype=float)
        if theta.size != 1 + m + (p + q) * r:
            raise ValidationError("theta vector has the wrong length")
        a_end = 1 + m + p * r
        return cls(
            gamma=theta[0],
            xi=theta[1:1 + m],
            a=theta[1 + m:a_end].reshape((p, r), order="F"),
            b=theta[a_end:].reshape((q, r), order="F"),
        )

    def reparametrize(self, c) -> "FactorParams":
        """Return ``(gamma, xi, A C, B C^{-T})``, which has the same ``beta``."""
        c = np.asarray(c, dtype=float)
        return FactorParams(self.gamma, self.xi, self.a @ c, self.b @ np.linalg.inv(c).T)


@dataclass(frozen=True, eq=False)
class CoefVector:
    """``beta = (gamma, xi, vec(eta))``."""

    gamma: float
    xi: np.ndarray
    eta_vec: np.ndarray
    p: int
    q: int

    @property
    def m(self) -> int:
        return len(self.xi)

    @property
    def eta(self) -> np.ndarray:
        return self.eta_vec.reshape((self.p, self.q), order="F")

    def to_vector(self) -> np.ndarray:
        return np.concatenate([[self.gamma], self.xi, self.eta_vec])

    @classmethod
    def from_vector(cls, beta, m: int, p: int, q: int) -> "CoefVector":
        beta = np.asarray(beta, dtype=float)
        if beta.size != 1 + m + p * q:
            raise ValidationError("beta vector has the wrong length")
        return cls(float(beta[0]), beta[1:1 + m].copy(), beta[1 + m:].copy(), p, q)

    @classmethod
    def from_parts(cls, gamma, xi, eta) -> "CoefVector":
        eta = np.asarray(eta, dtype=float)
        return cls(float(gamma), np.asarray(xi, dtype=float).reshape(-1), vec(eta),
                   eta.shape[0], eta.shape[1])


@dataclass(frozen=True, eq=False)
class FitResult:
    """Output of one rank-r penalized fit.

    ``covariance`` is ``None`` only when the sandwich estimate was skipped
    (``n <= s_r`` for the normal family, or ``with_covariance=False``).
    """

    theta_hat: FactorParams
    beta_hat: CoefVector
    covariance: Optional["SandwichCovariance"]
    sigma_sq_hat: Optional[float]
    objective_trace: tuple
    iterations: int
    converged: bool
    lambda_used: float
    s_r: int
    family: Family
    cv_table: Optional[dict] = None

    @property
    def sigma_hat(self) -> Optional[np.ndarray]:
        return None if self.covariance is None else self.covariance.matrix

    @property
    def eta_hat(self) -> np.ndarray:
        return self.beta_hat.eta


def design_row(z_i, m_i) -> np.ndarray:
    """``X_i = (1, z_i, vec(M_i))``."""
    z_i = np.zeros(0) if z_i is None else np.asarray(z_i, dtype=float).reshape(-1)
    return np.concatenate([[1.0], z_i, vec(m_i)])


def beta_of_theta(theta: FactorParams) -> CoefVector:
    return CoefVector(theta.gamma, theta.xi.copy(), vec(theta.eta), theta.p, theta.q)


def effective_params(m: int, p: int, q: int, r: int) -> int:
    """Number of identifiable parameters of the rank-r model, ``1 + m + (p + q - r) r``."""
    if not 0 <= r <= min(p, q):
        raise ValidationError(f"need 0 <= r <= min(p, q), got r={r}")
    return 1 + m + (p + q - r) * r


def _beta_array(beta) -> np.ndarray:
    if isinstance(beta, CoefVector):
        return beta.to_vector()
    if isinstance(beta, FactorParams):
        return beta_of_theta(beta).to_vector()
    return np.asarray(beta, dtype=float)


def linear_predictor(beta, data: MatrixDataset) -> np.ndarray:
    b = _beta_array(beta)
    if b.size != data.dim:
        raise ValidationError(f"beta has length {b.size}, design has {data.dim} columns")
    return data.design @ b


def loglik_from_predictor(u: np.ndarray, y: np.ndarray, family: Family) -> float:
    if family is Family.NORMAL:
        return -0.5 * float(np.mean((y - u) ** 2))
    return float(np.mean(y * u - np.logaddexp(0.0, u)))


def log_likelihood(beta, data: MatrixDataset, family) -> float:
    """Average log-likelihood without constants.

    Normal: ``-(1/2n) sum (y - X b)^2`` (no variance term).
    Logistic: ``(1/n) sum [y u - log(1 + e^u)]`` with ``u = X b``.
    """
    family = Family.parse(family)
    return loglik_from_predictor(linear_predictor(beta, data), data.y, family)


def penalty_value(theta: FactorParams, lam: float) -> float:
    return 0.5 * lam * frobenius_norm_sq(theta.a) * frobenius_norm_sq(theta.b)


def penalized_objective(theta: FactorParams, data: MatrixDataset, family, lam: float) -> float:
    if lam < 0:
        raise ValidationError("lambda must be >= 0")
    return log_likelihood(theta, data, family) - penalty_value(theta, lam)


def mean_function(u: np.ndarray, family: Family) -> np.ndarray:
    return u if family is Family.NORMAL else expit(u)


def objective_gradient(theta: FactorParams, data: MatrixDataset, family, lam: float) -> np.ndarray:
    """Gradient of :func:`penalized_objective` in ``FactorParams.to_vector`` order."""
    family = Family.parse(family)
    u = linear_predictor(theta, data)
    resid = (data.y - mean_function(u, family)) / data.n
    g_base = data.base_design.T @ resid
    g_eta = (data.vec_mats.T @ resid).reshape((data.p, data.q), order="F")
    a, b = theta.a, theta.b
    g_a = g_eta @ b - lam * frobenius_norm_sq(b) * a
    g_b = g_eta.T @ a - lam * frobenius_norm_sq(a) * b
    return np.concatenate([g_base, vec(g_a), vec(g_b)])

