"""Simulation studies and the end-to-end analysis workflow."""

from __future__ import annotations

import json
import logging
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .errors import NumericalError, ValidationError
from .estimator import fit
from .inference import confidence_intervals
from .io import write_table
from .model import CvGrid, MatrixDataset, ModelSpec
from .scenarios import EtaPattern, ScenarioConfig, Template, generate_scenario
from .testing import Method, StatisticKind, default_method, resampling_test

logger = logging.getLogger(__name__)

ALPHA = 0.05


def _derived_seed(*parts: int) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


def _pmap(func, items, n_jobs: int):
    if n_jobs is None or n_jobs <= 1 or len(items) < 2:
        return [func(it) for it in items]
    with ProcessPoolExecutor(max_workers=n_jobs) as pool:
        return list(pool.map(func, items, chunksize=max(1, len(items) // (4 * n_jobs))))


def spec_metadata(spec: ModelSpec) -> dict:
    if isinstance(spec.penalty, CvGrid):
        penalty = {"policy": "cv", "candidates": spec.penalty.candidates,
                   "folds": spec.penalty.folds}
    else:
        penalty = {"policy": "fixed", "lambda": spec.penalty}
    return {
        "family": spec.family.value,
        "rank": spec.rank,
        "penalty": penalty,
        "max_outer_iters": spec.max_outer_iters,
        "beta_rel_tol": spec.beta_rel_tol,
        "ridge_eps": spec.ridge_eps,
        "pinv_rel_tol": spec.pinv_rel_tol,
    }


def config_metadata(config: ScenarioConfig) -> dict:
    out = asdict(config)
    out["template"] = config.template.value
    out["eta_pattern"] = config.eta_pattern.value
    out["synthetic"] = True
    return out


@dataclass
class StudyReport:
    """Tabular study output plus metadata."""

    header: list
    rows: list
    summary: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def write(self, path) -> None:
        meta = dict(self.metadata)
        meta["summary"] = self.summary
        write_table(path, self.header, self.rows, meta)

    def column(self, name: str) -> list:
        i = self.header.index(name)
        return [row[i] for row in self.rows]


# ---------------------------------------------------------------------------
# estimation study


def reported_coordinates(config: ScenarioConfig) -> list:
    """``(label, index)`` pairs reported in the estimation table."""
    d = config.dims
    m, p = d["m"], d["p"]
    coords = [("gamma", 0)]
    if config.template is Template.PSQI_NORMAL:
        coords += [(f"xi_G{k + 1}", 1 + k) for k in range(5)]
        coords += [(f"xi_E{k + 1}", 1 + p + k) for k in range(3)]
    coords += [("eta_11", 1 + m), ("eta_21", 2 + m)]
    return coords


def _estimation_replicate(args):
    config, spec, i = args
    data, truth = generate_scenario(config, i)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            res = fit(data, spec, seed=_derived_seed(config.seed, i, 7))
        se = res.covariance.standard_errors(data.n)
    except NumericalError as exc:
        return {"i": i, "error": str(exc)}
    beta = res.beta_hat.to_vector()
    zero = truth.to_vector() == 0
    return {"i": i, "beta": beta, "se": se, "amse": float(np.mean(beta[zero] ** 2)),
            "converged": res.converged, "lambda": res.lambda_used}


def run_estimation_study(config: ScenarioConfig, spec: ModelSpec, n_jobs: int = 1) -> StudyReport:
    """Mean, SD and average standard error of the reported coefficients, plus AMSE.

    AMSE for one replicate is the mean of ``beta_hat_j^2`` over coordinates
    whose true value is zero.
    """
    if config.eta_pattern is not EtaPattern.FIXED_CORNER:
        raise ValidationError("the estimation study uses the fixed-corner pattern")
    outs = _pmap(_estimation_replicate, [(config, spec, i) for i in range(config.replicates)],
                 n_jobs)
    good = [o for o in outs if "error" not in o]
    failed = [o["i"] for o in outs if "error" in o]
    if not good:
        raise NumericalError("every replicate fit failed")
    betas = np.array([o["beta"] for o in good])
    ses = np.array([o["se"] for o in good])
    amse = np.array([o["amse"] for o in good])
    _, truth = generate_scenario(config, 0)
    tvec = truth.to_vector()
    header = ["parameter", "true", "mean", "sd", "se", "se_over_sd"]
    rows = []
    for label, j in reported_coordinates(config):
        sd = float(np.std(betas[:, j], ddof=1)) if len(good) > 1 else float("nan")
        se = float(np.mean(ses[:, j]))
        rows.append([label, float(tvec[j]), float(np.mean(betas[:, j])), sd, se,
                     se / sd if sd > 0 else float("nan")])
    summary = {
        "amse_mean": float(np.mean(amse)),
        "amse_sd": float(np.std(amse, ddof=1)) if len(good) > 1 else float("nan"),
        "replicates": config.replicates,
        "used": len(good),
        "failed": failed,
        "non_converged": int(sum(not o["converged"] for o in good)),
        "lambda_counts": _counts(o["lambda"] for o in good),
    }
    meta = {"study": "estimation", "config": config_metadata(config),
            "spec": spec_metadata(spec), "version": __version__}
    return StudyReport(header, rows, summary, meta)


def _counts(values) -> dict:
    out = {}
    for v in values:
        key = repr(float(v))
        out[key] = out.get(key, 0) + 1
    return dict(sorted(out.items()))


# ---------------------------------------------------------------------------
# power study


def _power_replicate(args):
    config, spec, kinds, c, i, reps, method, lambda_mode = args
    data, _ = generate_scenario(config.with_effect(c), i)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            out = resampling_test(data, spec, kinds, method, reps,
                                  seed=_derived_seed(config.seed, i, 11), lambda_mode=lambda_mode)
    except (NumericalError, ValidationError) as exc:
        return {"c": c, "i": i, "error": str(exc)}
    return {"c": c, "i": i, "p": {k.value: r.p_value for k, r in out.results.items()}}


def run_power_study(
    config: ScenarioConfig,
    spec: ModelSpec,
    kinds: Sequence = (StatisticKind.COMBINED, StatisticKind.COMBINED_GESAT, StatisticKind.GESAT),
    c_grid: Sequence[float] = (0.0,),
    reps_per_test: int = 199,
    method: Optional[str] = None,
    alpha: float = ALPHA,
    lambda_mode: str = "same",
    n_jobs: int = 1,
    keep_pvalues: bool = False,
) -> StudyReport:
    """Rejection rates at level ``alpha`` for each statistic and effect size.

    The resampling method defaults to permutation when the template has no
    confounders and the parametric bootstrap otherwise.  Replicate ``i``
    uses the same design and noise for every effect size.  With
    ``keep_pvalues`` the per-dataset p-values are kept in
    ``summary["pvalues"][statistic][repr(c)]``.
    """
    kinds = tuple(StatisticKind.parse(k) for k in kinds)
    if method is None:
        method = Method.PERMUTATION if config.dims["m"] == 0 else Method.BOOTSTRAP
    method = Method(method)
    c_grid = [float(c) for c in c_grid]
    if not c_grid or any(c < 0 for c in c_grid):
        raise ValidationError("effect-size grid must be nonempty and nonnegative")
    items = [(config, spec, kinds, c, i, reps_per_test, method, lambda_mode)
             for c in c_grid for i in range(config.replicates)]
    outs = _pmap(_power_replicate, items, n_jobs)
    header = ["statistic", "c", "rejection_rate", "mc_se", "datasets", "failed"]
    rows = []
    for k in kinds:
        for c in c_grid:
            sub = [o for o in outs if o["c"] == c]
            ok = [o for o in sub if "error" not in o]
            if ok:
                rate = float(np.mean([o["p"][k.value] <= alpha for o in ok]))
                se = float(np.sqrt(rate * (1 - rate) / len(ok)))
            else:
                rate, se = float("nan"), float("nan")
            rows.append([k.value, c, rate, se, len(ok), len(sub) - len(ok)])
    summary = {}
    if keep_pvalues:
        summary["pvalues"] = {
            k.value: {repr(c): [o["p"][k.value] for o in outs if o["c"] == c and "error" not in o]
                      for c in c_grid}
            for k in kinds
        }
    meta = {"study": "power", "config": config_metadata(config), "spec": spec_metadata(spec),
            "method": method.value, "reps_per_test": reps_per_test, "alpha": alpha,
            "lambda_mode": lambda_mode, "kinds": [k.value for k in kinds], "c_grid": c_grid,
            "version": __version__}
    return StudyReport(header, rows, summary, meta)


def rates_by_kind(report: StudyReport) -> dict:
    """``{statistic: [(c, rate), ...]}`` from a power report."""
    out = {}
    for row in report.rows:
        out.setdefault(row[0], []).append((row[1], row[2]))
    return out


# ---------------------------------------------------------------------------
# analysis workflow


@dataclass
class AnalysisReport:
    """Fit, intervals, per-coordinate and global resampling p-values for one dataset."""

    p: int
    q: int
    m: int
    n: int
    beta_hat: list
    std_errors: list
    ci_lower: list
    ci_upper: list
    coordinate_pvalues: list
    bonferroni_level: float
    significant: list
    global_pvalues: dict
    global_statistics: dict
    metadata: dict

    @property
    def eta_hat(self) -> np.ndarray:
        k = 1 + self.m
        return np.array(self.beta_hat[k:]).reshape((self.p, self.q), order="F")

    @property
    def significant_cells(self) -> list:
        """1-based ``(row, col)`` of flagged ``eta`` entries."""
        return [(j % self.p + 1, j // self.p + 1) for j, s in enumerate(self.significant) if s]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "AnalysisReport":
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, allow_nan=True)

    @classmethod
    def from_json(cls, text: str) -> "AnalysisReport":
        return cls.from_dict(json.loads(text))

    def coefficient_names(self) -> list:
        names = ["gamma"] + [f"xi_{k + 1}" for k in range(self.m)]
        names += [f"eta_{j + 1}_{k + 1}" for k in range(self.q) for j in range(self.p)]
        return names

    def write(self, out_dir) -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        k = 1 + self.m
        rows = []
        for j, name in enumerate(self.coefficient_names()):
            pval = self.coordinate_pvalues[j - k] if j >= k else None
            flag = self.significant[j - k] if j >= k else None
            rows.append([name, self.beta_hat[j], self.std_errors[j], self.ci_lower[j],
                         self.ci_upper[j], pval, flag])
        meta = dict(self.metadata)
        meta.update(global_pvalues=self.global_pvalues, global_statistics=self.global_statistics,
                    bonferroni_level=self.bonferroni_level, n=self.n, m=self.m, p=self.p, q=self.q)
        write_table(out_dir / "coefficients.csv",
                    ["parameter", "estimate", "std_error", "ci_lower", "ci_upper", "p_value",
                     "significant"], rows, meta)
        eta = self.eta_hat
        write_table(out_dir / "eta_hat.csv", ["row"] + [f"col{c + 1}" for c in range(self.q)],
                    [[r + 1] + list(eta[r]) for r in range(self.p)])
        write_table(out_dir / "global_tests.csv", ["statistic", "observed", "p_value"],
                    [[k, self.global_statistics[k], v] for k, v in self.global_pvalues.items()])
        (out_dir / "report.json").write_text(self.to_json() + "\n")


def analyze(
    data: MatrixDataset,
    spec: ModelSpec,
    kinds: Sequence = (StatisticKind.COMBINED, StatisticKind.COMBINED_GESAT, StatisticKind.GESAT),
    method: Optional[str] = None,
    reps: int = 999,
    alpha: float = ALPHA,
    seed: int = 0,
    lambda_mode: str = "same",
    n_jobs: int = 1,
) -> AnalysisReport:
    """Fit, report intervals, and test both globally and coordinate by coordinate.

    Coordinate ``j`` of ``eta`` is flagged when its resampling p-value for
    ``eta_j^2 / (Sigma_j / n)`` is at most ``alpha / (p q)``.
    """
    if not 0 < alpha < 1:
        raise ValidationError("alpha must lie in (0, 1)")
    method = default_method(data) if method in (None, "auto") else Method(method)
    out = resampling_test(data, spec, kinds, method, reps, seed, lambda_mode=lambda_mode,
                          n_jobs=n_jobs, coordinates=True)
    res = out.observed_fit
    cov = res.covariance
    beta = res.beta_hat.to_vector()
    ci = confidence_intervals(beta, cov, alpha, data.n)
    level = alpha / (data.p * data.q)
    pvals = out.coordinate_pvalues
    flags = [bool(np.isfinite(pv) and pv <= level) for pv in pvals]
    meta = {"workflow": "analyze", "spec": spec_metadata(spec), "method": method.value,
            "reps": reps, "seed": seed, "alpha": alpha, "lambda_used": res.lambda_used,
            "lambda_mode": lambda_mode, "converged": res.converged,
            "iterations": res.iterations, "s_r": res.s_r, "cv_table": res.cv_table,
            "failed_replicates": len(out.failures), "version": __version__}
    return AnalysisReport(
        p=data.p, q=data.q, m=data.m, n=data.n,
        beta_hat=[float(v) for v in beta],
        std_errors=[float(v) for v in cov.standard_errors(data.n)],
        ci_lower=[float(v) for v in ci[:, 0]],
        ci_upper=[float(v) for v in ci[:, 1]],
        coordinate_pvalues=[float(v) for v in pvals],
        bonferroni_level=level,
        significant=flags,
        global_pvalues={k.value: r.p_value for k, r in out.results.items()},
        global_statistics={k.value: r.observed for k, r in out.results.items()},
        metadata=meta,
    )
