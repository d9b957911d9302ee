"""Global tests of ``eta = 0`` with resampling p-values.

Five statistics are available: the Wald form ``T_wald``, the max of squared
standardized ``eta`` coordinates ``T_max``, their product ``T``, the
variance-component score ``T_gesat`` and ``T* = T * T_gesat``.  Null
distributions come from a parametric bootstrap of the fitted null model or,
when there are no confounders, from permuting the matrix covariates.

Replicate ``b`` always draws from ``numpy.random.default_rng([seed, b])``,
so results do not depend on how replicates are scheduled across workers.
"""

from __future__ import annotations

import enum
import logging
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, Iterable, Optional, Sequence

import numpy as np
from scipy.special import expit

from .errors import ConvergenceError, DegenerateCovarianceError, NumericalError, ValidationError
from .estimator import fit, solve_penalized_glm
from .model import CvGrid, Family, FitResult, MatrixDataset, ModelSpec
from .numkit import pinv

logger = logging.getLogger(__name__)

DIAG_FLOOR_REL = 1e-12
FAILURE_WARN_FRACTION = 0.02


class StatisticKind(str, enum.Enum):
    WALD = "wald"
    MAX = "max"
    COMBINED = "combined"
    GESAT = "gesat"
    COMBINED_GESAT = "combined_gesat"

    @classmethod
    def parse(cls, value) -> "StatisticKind":
        if isinstance(value, StatisticKind):
            return value
        key = str(value).lower().replace("-", "_")
        aliases = {"t": "combined", "tstar": "combined_gesat", "t_star": "combined_gesat",
                   "star": "combined_gesat"}
        try:
            return cls(aliases.get(key, key))
        except ValueError:
            raise ValidationError(f"unknown statistic {value!r}") from None


class Method(str, enum.Enum):
    BOOTSTRAP = "bootstrap"
    PERMUTATION = "permutation"


@dataclass(frozen=True, eq=False)
class NullFit:
    """Restricted MLE of ``(gamma, xi)`` under ``eta = 0``."""

    gamma: float
    xi: np.ndarray
    sigma_sq: Optional[float] = None

    def predictor(self, data: MatrixDataset) -> np.ndarray:
        return self.gamma + data.z @ self.xi


@dataclass(frozen=True)
class TestResult:
    kind: StatisticKind
    observed: float
    resample_values: tuple
    p_value: float
    method: Method
    reps: int
    seed: int
    failures: int = 0

    __test__ = False  # not a pytest class


def null_fit(data: MatrixDataset, family) -> NullFit:
    """Fit the model without the matrix covariate.

    Normal: least squares on ``(1, Z)`` with variance divisor ``n - (m + 1)``.
    Logistic: Newton iterations on ``(1, Z)``; raises
    :class:`ConvergenceError` on separable data.
    """
    family = Family.parse(family)
    data.check_family(family)
    k = 1 + data.m
    if data.n <= k:
        raise ValidationError(f"null model needs n > m + 1 = {k}, got n = {data.n}")
    x = data.base_design
    pen = np.zeros(k)
    if family is Family.NORMAL:
        coef = solve_penalized_glm(x, data.y, family, pen)
        resid = data.y - x @ coef
        return NullFit(float(coef[0]), coef[1:], float(resid @ resid / (data.n - k)))
    ybar = data.y.mean()
    if ybar in (0.0, 1.0):
        raise ConvergenceError("null logistic fit diverges: response is constant")
    start = np.zeros(k)
    start[0] = np.log(ybar / (1 - ybar))
    coef = solve_penalized_glm(x, data.y, family, pen, start=start)
    return NullFit(float(coef[0]), coef[1:])


def _eta_is_zero(fit: FitResult) -> bool:
    return not np.any(fit.beta_hat.eta_vec)


def _require_cov(fit: FitResult):
    if fit.covariance is None:
        raise ValidationError("fit carries no covariance estimate")
    return fit.covariance


def t_wald(fit: FitResult, n: int) -> float:
    """``vec(eta)' {Sigma_eta / n}^+ vec(eta)``."""
    if _eta_is_zero(fit):
        return 0.0
    cov = _require_cov(fit)
    e = fit.beta_hat.eta_vec
    val = float(e @ pinv(cov.eta_block / n, cov.pinv_rel_tol, hermitian=True) @ e)
    return max(val, 0.0)


def standardized_eta_sq(fit: FitResult, n: int) -> np.ndarray:
    """``eta_j^2 / (Sigma_j / n)`` per ``eta`` coordinate; ``nan`` where excluded.

    Coordinates whose variance is at most ``1e-12`` times the largest
    ``eta`` variance are structurally degenerate and excluded.
    """
    cov = _require_cov(fit)
    d = cov.diagonal()[-cov.n_eta:]
    e = fit.beta_hat.eta_vec
    out = np.full(e.shape, np.nan)
    top = d.max() if d.size else 0.0
    keep = d > DIAG_FLOOR_REL * top if top > 0 else np.zeros(d.shape, dtype=bool)
    out[keep] = n * e[keep] ** 2 / d[keep]
    return out


def t_max(fit: FitResult, n: int, m: int = None, p: int = None, q: int = None) -> float:
    """Largest squared standardized ``eta`` coefficient.

    ``m, p, q`` are accepted for symmetry with the other statistics; the
    ``eta`` block is read from the fit itself.
    """
    if _eta_is_zero(fit):
        return 0.0
    z = standardized_eta_sq(fit, n)
    if np.all(np.isnan(z)):
        raise DegenerateCovarianceError("every eta coordinate has zero estimated variance")
    return float(np.nanmax(z))


def t_combined(fit: FitResult, n: int, m: int = None, p: int = None, q: int = None) -> float:
    return t_wald(fit, n) * t_max(fit, n)


def null_residuals(data: MatrixDataset, nf: NullFit, family=None,
                   residual: str = "literal") -> np.ndarray:
    if residual == "literal":
        return data.y - nf.predictor(data)
    if residual == "mean":
        if family is None or Family.parse(family) is Family.NORMAL:
            return data.y - nf.predictor(data)
        return data.y - expit(nf.predictor(data))
    raise ValidationError(f"unknown residual type {residual!r}; use 'literal' or 'mean'")


def t_gesat(data: MatrixDataset, nf: NullFit, family=None, residual: str = "literal") -> float:
    """``|| sum_i res_i vec(M_i) ||^2`` with null-model residuals.

    ``residual="literal"`` uses ``y - gamma - xi'z`` for both families;
    ``residual="mean"`` uses ``y - expit(gamma + xi'z)`` for logistic data.
    """
    score = data.vec_mats.T @ null_residuals(data, nf, family, residual)
    return float(score @ score)


def t_star(fit: FitResult, data: MatrixDataset, nf: NullFit, n: int = None, m: int = None,
           p: int = None, q: int = None, family=None, residual: str = "literal") -> float:
    n = data.n if n is None else n
    return t_combined(fit, n) * t_gesat(data, nf, family, residual)


def compute_statistics(kinds: Iterable[StatisticKind], fit: Optional[FitResult],
                       data: MatrixDataset, nf: Optional[NullFit], family=None,
                       residual: str = "literal") -> Dict[StatisticKind, float]:
    """Evaluate several statistics, sharing the expensive pieces."""
    kinds = [StatisticKind.parse(k) for k in kinds]
    n = data.n
    cache = {}

    def wald():
        if "wald" not in cache:
            cache["wald"] = t_wald(fit, n)
        return cache["wald"]

    def tmax():
        if "max" not in cache:
            cache["max"] = t_max(fit, n)
        return cache["max"]

    def gesat():
        if "gesat" not in cache:
            cache["gesat"] = t_gesat(data, nf, family, residual)
        return cache["gesat"]

    out = {}
    for k in kinds:
        if k is StatisticKind.WALD:
            out[k] = wald()
        elif k is StatisticKind.MAX:
            out[k] = tmax()
        elif k is StatisticKind.COMBINED:
            out[k] = wald() * tmax()
        elif k is StatisticKind.GESAT:
            out[k] = gesat()
        else:
            out[k] = wald() * tmax() * gesat()
    return out


def add_one_pvalue(observed: float, resamples: Sequence[float]) -> float:
    """``(1 + #{T_b >= T}) / (1 + B)``; ties count as exceedances."""
    resamples = np.asarray(resamples, dtype=float)
    return float((1 + np.count_nonzero(resamples >= observed)) / (1 + resamples.size))


# ---------------------------------------------------------------------------
# resampling engine


@dataclass(frozen=True)
class ResamplingPlan:
    """Everything a worker needs to run replicates independently."""

    data: MatrixDataset
    spec: ModelSpec
    kinds: tuple
    method: Method
    seed: int
    lam: Optional[float]
    residual: str
    null: Optional[NullFit]
    init_b: Optional[np.ndarray]
    coordinates: bool


@dataclass
class ReplicateOutput:
    b: int
    stats: Optional[Dict[StatisticKind, float]]
    coords: Optional[np.ndarray] = None
    error: Optional[str] = None


def _replicate_data(plan: ResamplingPlan, rng: np.random.Generator) -> MatrixDataset:
    data = plan.data
    if plan.method is Method.PERMUTATION:
        return data.permute_mats(rng.permutation(data.n))
    mean = plan.null.predictor(data)
    if plan.spec.family is Family.NORMAL:
        y = mean + np.sqrt(plan.null.sigma_sq) * rng.standard_normal(data.n)
    else:
        y = (rng.random(data.n) < expit(mean)).astype(float)
    return data.with_response(y)


def evaluate(plan: ResamplingPlan, data: MatrixDataset):
    """Fit ``data`` and compute the plan's statistics.

    Returns ``(output, fit)``; ``fit`` is ``None`` when only ``T_gesat`` was
    requested.  Cross-validation inside the fit always uses ``plan.seed`` so
    the fold split is shared by the observed data and every replicate.
    """
    family = plan.spec.family
    need_fit = any(k is not StatisticKind.GESAT for k in plan.kinds) or plan.coordinates
    need_null = any(k in (StatisticKind.GESAT, StatisticKind.COMBINED_GESAT) for k in plan.kinds)
    fitted = None
    if need_fit:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            fitted = fit(data, plan.spec, seed=plan.seed, lam=plan.lam, init_b=plan.init_b,
                         check_rank=False)
    nf = null_fit(data, family) if need_null else None
    stats = compute_statistics(plan.kinds, fitted, data, nf, family, plan.residual)
    coords = standardized_eta_sq(fitted, data.n) if plan.coordinates else None
    return ReplicateOutput(-1, stats, coords), fitted


def _run_replicate(plan: ResamplingPlan, b: int) -> ReplicateOutput:
    rng = np.random.default_rng([plan.seed, b])
    data_b = _replicate_data(plan, rng)
    try:
        out, _ = evaluate(plan, data_b)
    except (NumericalError, ValidationError) as exc:
        return ReplicateOutput(b, None, None, f"{type(exc).__name__}: {exc}")
    out.b = b
    return out


def _run_block(args) -> list:
    plan, bs = args
    return [_run_replicate(plan, b) for b in bs]


def run_replicates(plan: ResamplingPlan, reps: int, n_jobs: int = 1) -> list:
    """Run replicates ``1..reps``; output order is always by replicate index."""
    indices = list(range(1, reps + 1))
    if n_jobs is None or n_jobs <= 1 or reps < 2:
        return _run_block((plan, indices))
    chunks = [indices[i::n_jobs] for i in range(n_jobs)]
    with ProcessPoolExecutor(max_workers=n_jobs) as pool:
        parts = list(pool.map(_run_block, [(plan, c) for c in chunks if c]))
    outs = [o for part in parts for o in part]
    return sorted(outs, key=lambda o: o.b)


@dataclass
class ResamplingOutcome:
    """Results of one resampling run for several statistics at once."""

    results: Dict[StatisticKind, TestResult]
    observed_fit: Optional[FitResult]
    null: Optional[NullFit]
    lambda_used: Optional[float]
    coordinate_observed: Optional[np.ndarray] = None
    coordinate_pvalues: Optional[np.ndarray] = None
    failures: list = field(default_factory=list)


def resampling_test(
    data: MatrixDataset,
    spec: ModelSpec,
    kinds: Sequence = (StatisticKind.COMBINED,),
    method="bootstrap",
    reps: int = 999,
    seed: int = 0,
    lambda_mode: str = "same",
    residual: str = "literal",
    n_jobs: int = 1,
    coordinates: bool = False,
    warm_start: bool = False,
) -> ResamplingOutcome:
    """Resampling p-values for several statistics from one set of replicates.

    Args:
        data: observed sample.
        spec: model specification; its penalty policy is reused for every
            replicate fit.
        kinds: statistics to evaluate.
        method: ``"bootstrap"`` (parametric, from the null fit) or
            ``"permutation"`` (shuffles the matrix covariates; needs ``m == 0``).
        reps: number of replicates.
        seed: master seed.
        lambda_mode: ``"same"`` repeats the observed penalty policy in every
            replicate (cross-validation reruns when ``spec.penalty`` is a CV grid);
            ``"frozen"`` fixes every replicate at the observed penalty, which
            is faster but only approximate under CV.
        residual: residual type for ``T_gesat``.
        n_jobs: worker processes; results do not depend on it.
        coordinates: also compute per-coordinate p-values for ``eta``.
        warm_start: start replicate fits from the observed ``B``.
    """
    method = Method(method)
    kinds = tuple(StatisticKind.parse(k) for k in kinds)
    if not kinds:
        raise ValidationError("at least one statistic is required")
    if reps < 1:
        raise ValidationError("reps must be >= 1")
    if lambda_mode not in ("same", "frozen"):
        raise ValidationError("lambda_mode must be 'same' or 'frozen'")
    spec.check_data(data)
    if method is Method.PERMUTATION and data.m > 0:
        raise ValidationError(
            "the permutation test cannot be applied in the presence of confounders Z "
            f"(m = {data.m}); use the parametric bootstrap"
        )
    family = spec.family
    nf = null_fit(data, family)

    base_plan = ResamplingPlan(data, spec, kinds, method, seed, None, residual, nf, None,
                               coordinates)
    observed, obs_fit = evaluate(base_plan, data)
    lam_used = None if obs_fit is None else obs_fit.lambda_used

    lam = lam_used if (lambda_mode == "frozen" or not isinstance(spec.penalty, CvGrid)) else None
    init_b = obs_fit.theta_hat.b if (warm_start and obs_fit is not None) else None
    plan = ResamplingPlan(data, spec, kinds, method, seed, lam, residual, nf, init_b,
                          coordinates)
    outs = run_replicates(plan, reps, n_jobs=n_jobs)
    good = [o for o in outs if o.stats is not None]
    failures = [(o.b, o.error) for o in outs if o.stats is None]
    if len(failures) > FAILURE_WARN_FRACTION * reps:
        warnings.warn(
            f"{len(failures)} of {reps} replicate fits failed and were excluded",
            RuntimeWarning,
            stacklevel=2,
        )
    if not good:
        raise NumericalError("every resampling replicate failed")

    results = {}
    for k in kinds:
        values = tuple(o.stats[k] for o in good)
        results[k] = TestResult(k, observed.stats[k], values,
                                add_one_pvalue(observed.stats[k], values), method,
                                len(good), seed, len(failures))
    coord_p = None
    if coordinates:
        obs_c = observed.coords
        rep_c = np.array([o.coords for o in good])
        with np.errstate(invalid="ignore"):
            exceed = np.sum(rep_c >= obs_c[None, :], axis=0)
        coord_p = (1 + exceed) / (1 + len(good))
        coord_p[np.isnan(obs_c)] = np.nan
    return ResamplingOutcome(results, obs_fit, nf, lam_used,
                             observed.coords if coordinates else None, coord_p, failures)


def parametric_bootstrap_pvalue(data: MatrixDataset, spec: ModelSpec, kind, reps: int,
                                seed: int, **kwargs) -> TestResult:
    out = resampling_test(data, spec, (kind,), "bootstrap", reps, seed, **kwargs)
    return out.results[StatisticKind.parse(kind)]


def permutation_pvalue(data: MatrixDataset, spec: ModelSpec, kind, reps: int, seed: int,
                       **kwargs) -> TestResult:
    out = resampling_test(data, spec, (kind,), "permutation", reps, seed, **kwargs)
    return out.results[StatisticKind.parse(kind)]


def default_method(data: MatrixDataset) -> Method:
    """Permutation when there are no confounders, bootstrap otherwise."""
    return Method.PERMUTATION if data.m == 0 else Method.BOOTSTRAP
