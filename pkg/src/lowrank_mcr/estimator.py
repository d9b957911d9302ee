"""Penalized maximum likelihood for the rank-r model by alternating block fits.

Each outer iteration fixes ``B`` and solves a ridge-type GLM for
``(gamma, xi, A)`` on the covariates ``M_i B``, then fixes ``A`` and solves
for ``(gamma, xi, B)`` on ``M_i' A``.  Both blocks are solved exactly, so the
penalized objective never decreases.
"""

from __future__ import annotations

import dataclasses
import logging
from math import sqrt
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.linalg.lapack import dpotrf, dpotrs
from scipy.special import expit

from .errors import ConvergenceError, IllPosedError, NumericalError, ValidationError
from .model import (
    CvGrid,
    FactorParams,
    Family,
    FitResult,
    MatrixDataset,
    ModelSpec,
    beta_of_theta,
    effective_params,
    linear_predictor,
    loglik_from_predictor,
)
from .numkit import frobenius_norm_sq, leading_right_singular_vectors

__all__ = [
    "CvGrid",
    "CvResult",
    "fit",
    "fit_alternating",
    "init_B",
    "resolve_lambda",
    "ridge_full_fit",
    "select_lambda_cv",
    "solve_given_a",
    "solve_given_b",
    "solve_penalized_glm",
]

logger = logging.getLogger(__name__)

NEWTON_GRAD_TOL = 1e-8
NEWTON_MAX_ITER = 100
# Cholesky pivot ratio below which a system counts as singular (condition ~ 1e14)
SINGULAR_RTOL = 1e-7


def _solve_spd(h: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Solve ``h x = g`` for symmetric positive definite ``h`` by Cholesky."""
    chol, info = dpotrf(h, lower=1, clean=0)
    if info != 0:
        raise IllPosedError("singular normal-equations matrix (not positive definite)")
    d = chol.diagonal()  # positive when dpotrf succeeds
    if d.min() <= SINGULAR_RTOL * d.max():
        raise IllPosedError(
            f"singular normal-equations matrix (pivot ratio {d.min() / d.max():.2e})"
        )
    x, info = dpotrs(chol, g, lower=1)
    return x


def _logistic_value(u, y, coef, pen, n):
    return (y @ u - np.logaddexp(0.0, u).sum()) / n - 0.5 * float(pen @ (coef * coef))


def solve_penalized_glm(
    x: np.ndarray,
    y: np.ndarray,
    family: Family,
    pen: np.ndarray,
    start: Optional[np.ndarray] = None,
    grad_tol: float = NEWTON_GRAD_TOL,
    max_iter: int = NEWTON_MAX_ITER,
) -> np.ndarray:
    """Maximize ``loglik(x @ c) - 0.5 * sum(pen * c**2)``.

    ``pen`` holds one nonnegative ridge weight per column of ``x``.  The
    normal family is one linear solve; the logistic family runs Newton with
    step halving from ``start`` so the objective never drops below its
    value at ``start``.
    """
    n, k = x.shape
    if family is Family.NORMAL:
        h = x.T @ x / n
        h[np.diag_indices(k)] += pen
        return _solve_spd(h, x.T @ y / n)

    coef = np.zeros(k) if start is None else np.array(start, dtype=float)
    u = x @ coef
    obj = _logistic_value(u, y, coef, pen, n)
    diag = np.diag_indices(k)
    gnorm = np.inf
    for _ in range(max_iter + 1):
        mu = expit(u)
        grad = x.T @ (y - mu) / n - pen * coef
        gnorm = sqrt(float(grad @ grad))
        if gnorm <= grad_tol:
            return coef
        if _ == max_iter:
            break
        w = mu * (1.0 - mu)
        h = (x.T * w) @ x / n
        h[diag] += pen
        step = _solve_spd(h, grad)
        # predicted ascent below roundoff of the objective: stationary for all purposes
        if float(grad @ step) <= 4 * np.finfo(float).eps * max(1.0, abs(obj)):
            return coef
        xs = x @ step
        t = 1.0
        while True:
            cand = coef + t * step
            cand_u = u + t * xs
            cand_obj = _logistic_value(cand_u, y, cand, pen, n)
            if cand_obj >= obj:
                break
            t *= 0.5
            if t < 1e-12:
                # no ascent left at machine precision; accept if already stationary
                if gnorm <= 1e3 * grad_tol:
                    return coef
                raise ConvergenceError(
                    f"Newton line search stalled with gradient norm {gnorm:.3e}"
                )
        coef, u, obj = cand, cand_u, cand_obj
    raise ConvergenceError(
        f"Newton did not converge in {max_iter} iterations (gradient norm {gnorm:.3e})"
    )


def _split(coef, m, dim, r):
    return float(coef[0]), coef[1:1 + m].copy(), coef[1 + m:].reshape((dim, r), order="F")


def mats_times_b(data: MatrixDataset, b: np.ndarray) -> np.ndarray:
    """Rows ``vec(M_i B)``, shape ``(n, p r)``."""
    mb = data.mats @ b
    return mb.transpose(0, 2, 1).reshape(data.n, -1)


def mats_t_times_a(data: MatrixDataset, a: np.ndarray) -> np.ndarray:
    """Rows ``vec(M_i' A)``, shape ``(n, q r)``."""
    ma = data.mats.transpose(0, 2, 1) @ a
    return ma.transpose(0, 2, 1).reshape(data.n, -1)


def ridge_full_fit(data: MatrixDataset, family, ridge_eps: float) -> np.ndarray:
    """Ridge estimate of ``eta`` in the unrestricted model, returned as ``p x q``.

    Only the ``eta`` coordinates carry the penalty ``(ridge_eps / 2) ||eta||^2``.
    """
    family = Family.parse(family)
    if ridge_eps <= 0:
        raise ValidationError("ridge_eps must be positive")
    if family is Family.NORMAL:
        _, reduced = _normal_profile(data)
        h = reduced.copy()
        h[np.diag_indices_from(h)] += ridge_eps
        eta = _solve_spd(h, _normal_response(data)[1])
        return eta.reshape((data.p, data.q), order="F")
    pen = np.zeros(data.dim)
    pen[1 + data.m:] = ridge_eps
    coef = solve_penalized_glm(data.design, data.y, family, pen, start=np.zeros(data.dim))
    return coef[1 + data.m:].reshape((data.p, data.q), order="F")


def init_B(eta_ridge: np.ndarray, r: int) -> np.ndarray:
    """Initial ``B``: top-``r`` right singular vectors of the ridge estimate.

    An exactly zero ``eta_ridge`` gives the first ``r`` canonical basis vectors.
    """
    eta_ridge = np.asarray(eta_ridge, dtype=float)
    if not np.any(eta_ridge):
        return np.eye(eta_ridge.shape[1])[:, :r]
    return leading_right_singular_vectors(eta_ridge, r)


def _block_pen(m: int, k: int, weight: float) -> np.ndarray:
    pen = np.zeros(1 + m + k)
    pen[1 + m:] = weight
    return pen


def _eta_map_given_b(b: np.ndarray, p: int) -> np.ndarray:
    """``B kron I_p``: ``vec(M B) = T' vec(M)``, so ``<A B', M> = vec(A)' T' vec(M)``."""
    q, r = b.shape
    return (b[:, None, :, None] * np.eye(p)[None, :, None, :]).reshape(q * p, r * p)


def _eta_map_given_a(a: np.ndarray, p: int, q: int) -> np.ndarray:
    """``K_{p,q}' (A kron I_q)``: ``vec(M' A) = T' vec(M)``."""
    r = a.shape[1]
    return (np.eye(q)[:, None, None, :] * a[None, :, :, None]).reshape(q * p, r * q)


def _normal_profile(data: MatrixDataset):
    """``(P, G)`` with ``(gamma, xi)`` profiled out of ``X'X/n``.

    ``P = G_bb^{-1} G_be`` and ``G = G_ee - G_eb P``; both depend on the
    design only and are cached on the dataset.
    """
    cached = data.__dict__.get("normal_profile")
    if cached is None:
        k0 = 1 + data.m
        g = data.gram
        proj = _solve_spd(g[:k0, :k0], g[:k0, k0:])
        reduced = g[k0:, k0:] - g[k0:, :k0] @ proj
        cached = (proj, 0.5 * (reduced + reduced.T))
        data.__dict__["normal_profile"] = cached
    return cached


def _normal_response(data: MatrixDataset):
    """Base-model coefficients ``G_bb^{-1} X_b'y/n``, the profiled ``X_e'y/n``
    and the base model's mean squared residual."""
    cached = data.__dict__.get("normal_response")
    if cached is None:
        k0 = 1 + data.m
        proj, _ = _normal_profile(data)
        base0 = _solve_spd(data.gram[:k0, :k0], data.xty[:k0])
        resid = data.y - data.base_design @ base0
        cached = (base0, data.xty[k0:] - proj.T @ data.xty[:k0], float(resid @ resid) / data.n)
        data.__dict__["normal_response"] = cached
    return cached


def _normal_block_solve(data: MatrixDataset, t: np.ndarray, weight: float) -> np.ndarray:
    # exact block maximizer: solve for the eta block on the profiled system,
    # then recover (gamma, xi) by back-substitution
    proj, reduced = _normal_profile(data)
    base0, rhs, _ = _normal_response(data)
    h = t.T @ (reduced @ t)
    idx = np.arange(h.shape[0])
    h[idx, idx] += weight
    block = _solve_spd(h, t.T @ rhs)
    return np.concatenate([base0 - proj @ (t @ block), block])


def _zero_factor_solve(data: MatrixDataset, family: Family, k: int, warm_start):
    # the block's covariates vanish: fit the base model and set the block to zero
    start = None
    if warm_start is not None and family is Family.LOGISTIC:
        start = np.concatenate([[warm_start[0]], np.asarray(warm_start[1], dtype=float)])
        if start.size != 1 + data.m:
            start = None
    coef = solve_penalized_glm(data.base_design, data.y, family, np.zeros(1 + data.m),
                               start=start)
    return np.concatenate([coef, np.zeros(k)])


def solve_given_b(data: MatrixDataset, family, b_fixed, lam: float, warm_start=None):
    """Maximize the penalized objective over ``(gamma, xi, A)`` with ``B`` fixed.

    Returns ``(gamma, xi, A)``.  ``warm_start`` is an optional
    ``(gamma, xi, A)`` tuple used by the logistic Newton iterations.
    """
    family = Family.parse(family)
    b_fixed = np.asarray(b_fixed, dtype=float)
    r = b_fixed.shape[1]
    weight = lam * frobenius_norm_sq(b_fixed)
    if not np.any(b_fixed):
        coef = _zero_factor_solve(data, family, data.p * r, warm_start)
    elif family is Family.NORMAL:
        coef = _normal_block_solve(data, _eta_map_given_b(b_fixed, data.p), weight)
    else:
        x = np.hstack([data.base_design, mats_times_b(data, b_fixed)])
        pen = _block_pen(data.m, data.p * r, weight)
        start = _pack_start(warm_start, data.m, data.p * r)
        coef = solve_penalized_glm(x, data.y, family, pen, start=start)
    return _split(coef, data.m, data.p, r)


def solve_given_a(data: MatrixDataset, family, a_fixed, lam: float, warm_start=None):
    """Mirror of :func:`solve_given_b`: returns ``(gamma, xi, B)`` with ``A`` fixed."""
    family = Family.parse(family)
    a_fixed = np.asarray(a_fixed, dtype=float)
    r = a_fixed.shape[1]
    weight = lam * frobenius_norm_sq(a_fixed)
    if not np.any(a_fixed):
        coef = _zero_factor_solve(data, family, data.q * r, warm_start)
    elif family is Family.NORMAL:
        coef = _normal_block_solve(data, _eta_map_given_a(a_fixed, data.p, data.q), weight)
    else:
        x = np.hstack([data.base_design, mats_t_times_a(data, a_fixed)])
        pen = _block_pen(data.m, data.q * r, weight)
        start = _pack_start(warm_start, data.m, data.q * r)
        coef = solve_penalized_glm(x, data.y, family, pen, start=start)
    return _split(coef, data.m, data.q, r)


def _pack_start(warm_start, m, k):
    if warm_start is None:
        return None
    gamma, xi, block = warm_start
    start = np.concatenate([[gamma], np.asarray(xi, dtype=float).reshape(-1),
                            np.asarray(block, dtype=float).reshape(-1, order="F")])
    if start.size != 1 + m + k:
        return None
    return start


def fit_alternating(
    data: MatrixDataset,
    spec: ModelSpec,
    lam: float,
    init_b: Optional[np.ndarray] = None,
    warm_start: Optional[FactorParams] = None,
    with_covariance: bool = True,
    check_rank: bool = True,
) -> FitResult:
    """Penalized MLE for a fixed penalty ``lam``.

    Args:
        data: the sample.
        spec: family, rank and convergence controls.
        lam: penalty weight on ``||A||_F^2 ||B||_F^2``.
        init_b: starting ``B``; defaults to the ridge-SVD initializer.
        warm_start: previous fit whose ``B`` (unless ``init_b`` is given)
            and ``(gamma, xi)`` seed the iterations.
        with_covariance: compute the sandwich covariance of ``beta_hat``.
        check_rank: warn when the Jacobian rank at the fit differs from ``s_r``.

    Returns:
        A :class:`FitResult`.  When the iteration cap is hit the last
        (highest-objective) iterate is returned with ``converged=False``.
    """
    spec.check_data(data)
    if lam < 0:
        raise ValidationError("lambda must be >= 0")
    family, r = spec.family, spec.rank
    s_r = effective_params(data.m, data.p, data.q, r)

    if init_b is None and warm_start is not None:
        init_b = warm_start.b
    if init_b is None:
        eps = spec.ridge_eps if spec.ridge_eps is not None else s_r / data.n
        b = init_B(ridge_full_fit(data, family, eps), r)
    else:
        b = np.asarray(init_b, dtype=float)
        if b.shape != (data.q, r):
            raise ValidationError(f"init_b must be {data.q}x{r}, got {b.shape}")

    if warm_start is not None and warm_start.m == data.m:
        gamma, xi = warm_start.gamma, warm_start.xi
    else:
        gamma, xi = 0.0, np.zeros(data.m)
    a = np.zeros((data.p, r))

    trace = []
    beta_prev = None
    converged = False
    it = 0
    for it in range(1, spec.max_outer_iters + 1):
        try:
            gamma, xi, a = solve_given_b(data, family, b, lam, warm_start=(gamma, xi, a))
            gamma, xi, b = solve_given_a(data, family, a, lam, warm_start=(gamma, xi, b))
        except NumericalError as exc:
            raise type(exc)(f"outer iteration {it}: {exc}") from exc
        beta = np.concatenate([[gamma], xi, (a @ b.T).reshape(-1, order="F")])
        trace.append(_objective(data, family, beta, a, b, lam))
        if beta_prev is not None:
            change = np.linalg.norm(beta - beta_prev) / max(1.0, np.linalg.norm(beta_prev))
            if change < spec.beta_rel_tol:
                converged = True
                break
        beta_prev = beta
    if not converged:
        logger.warning("alternating fit stopped after %d iterations without converging", it)

    theta = FactorParams(gamma, xi, a, b)
    beta_hat = beta_of_theta(theta)
    covariance = None
    sigma_sq = None
    if with_covariance:
        from .inference import sandwich_for_fit

        covariance, sigma_sq = sandwich_for_fit(data, theta, beta_hat, family, lam, s_r,
                                                spec.pinv_rel_tol, check_rank=check_rank)
    return FitResult(
        theta_hat=theta,
        beta_hat=beta_hat,
        covariance=covariance,
        sigma_sq_hat=sigma_sq,
        objective_trace=tuple(trace),
        iterations=it,
        converged=converged,
        lambda_used=float(lam),
        s_r=s_r,
        family=family,
    )


def _objective(data, family, beta, a, b, lam):
    pen = 0.5 * lam * float(np.sum(a * a)) * float(np.sum(b * b))
    if family is Family.NORMAL:
        # (gamma, xi) are profiled at every iterate, so the mean squared residual is
        # rss0 - 2 eta'r + eta'G eta in the profiled quantities
        _, reduced = _normal_profile(data)
        _, rhs, rss0 = _normal_response(data)
        eta = beta[1 + data.m:]
        return -0.5 * (rss0 - 2.0 * float(eta @ rhs) + float(eta @ (reduced @ eta))) - pen
    return loglik_from_predictor(data.design @ beta, data.y, family) - pen


@dataclass(frozen=True)
class CvResult:
    lambda_best: float
    scores: dict
    folds: int
    seed: int


def _fold_ids(n: int, folds: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    ids = np.empty(n, dtype=int)
    for f, idx in enumerate(np.array_split(rng.permutation(n), folds)):
        ids[idx] = f
    return ids


def _heldout_loss(fit: FitResult, test: MatrixDataset) -> float:
    u = linear_predictor(fit.beta_hat, test)
    if fit.family is Family.NORMAL:
        return float(np.mean((test.y - u) ** 2))
    return -loglik_from_predictor(u, test.y, Family.LOGISTIC)


def select_lambda_cv(data: MatrixDataset, spec: ModelSpec, grid: Optional[CvGrid] = None,
                     seed: int = 0) -> CvResult:
    """K-fold cross-validation of the penalty.

    Held-out loss is mean squared error (normal) or mean negative
    log-likelihood (logistic).  A fold whose fit fails or does not converge
    scores ``inf`` for that penalty.  Ties go to the larger penalty.
    """
    if grid is None:
        grid = spec.penalty if isinstance(spec.penalty, CvGrid) else CvGrid()
    spec.check_data(data)
    s_r = effective_params(data.m, data.p, data.q, spec.rank)
    cands = grid.resolve(s_r, data.n)
    if len(cands) == 1:
        return CvResult(float(cands[0]), {float(cands[0]): None}, grid.folds, seed)
    if grid.folds > data.n:
        raise ValidationError(f"{grid.folds} folds requested for {data.n} observations")

    ids = _fold_ids(data.n, grid.folds, seed)
    splits = [(data.subset(ids != f), data.subset(ids == f)) for f in range(grid.folds)]
    scores = {}
    for lam in cands:
        losses = []
        for train, test in splits:
            try:
                fold_fit = fit_alternating(train, spec, lam, with_covariance=False)
            except (NumericalError, ValidationError) as exc:
                logger.info("CV fold failed at lambda=%g: %s", lam, exc)
                losses.append(np.inf)
                continue
            losses.append(_heldout_loss(fold_fit, test) if fold_fit.converged else np.inf)
        scores[float(lam)] = float(np.mean(losses))
    best = min(scores.values())
    lam_best = max(lam for lam, s in scores.items() if s == best)
    return CvResult(lam_best, scores, grid.folds, seed)


def resolve_lambda(data: MatrixDataset, spec: ModelSpec, seed: int = 0):
    """Return ``(lambda, cv_result_or_None)`` according to ``spec.penalty``."""
    if isinstance(spec.penalty, CvGrid):
        cv = select_lambda_cv(data, spec, spec.penalty, seed=seed)
        return cv.lambda_best, cv
    return float(spec.penalty), None


def fit(data: MatrixDataset, spec: ModelSpec, seed: int = 0, init_b=None, warm_start=None,
        lam: Optional[float] = None, with_covariance: bool = True,
        check_rank: bool = True) -> FitResult:
    """Fit the rank-r model, choosing the penalty by CV when ``spec`` asks for it.

    ``lam`` overrides ``spec.penalty``.
    """
    cv = None
    if lam is None:
        lam, cv = resolve_lambda(data, spec, seed=seed)
    result = fit_alternating(data, spec, lam, init_b=init_b, warm_start=warm_start,
                             with_covariance=with_covariance, check_rank=check_rank)
    if cv is not None:
        result = dataclasses.replace(result, cv_table=dict(cv.scores))
    return result

