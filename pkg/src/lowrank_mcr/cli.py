"""Command-line interface.

Verbs: ``fit``, ``test``, ``cv``, ``simulate`` and ``analyze``.  Every verb
writes a CSV table plus a ``.meta.json`` sidecar.  Exit status is 0 on
success, 2 for invalid input and 3 for numerical failure; failures also
print one JSON line on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import warnings
from pathlib import Path

from . import __version__
from .errors import LowRankError, NumericalError, ValidationError
from .estimator import fit, select_lambda_cv
from .inference import confidence_intervals
from .io import load_dataset, save_dataset, write_table
from .model import CvGrid, Family, ModelSpec, effective_params
from .scenarios import EtaPattern, ScenarioConfig, Template, generate_scenario
from .studies import (
    analyze,
    config_metadata,
    run_estimation_study,
    run_power_study,
    spec_metadata,
)
from .testing import Method, StatisticKind, default_method, resampling_test

logger = logging.getLogger("lowrank_mcr")

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3
RATIO_HEURISTIC = 5.0


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        _emit_error("usage", message)
        self.print_usage(sys.stderr)
        sys.exit(EXIT_INPUT)


def _emit_error(kind: str, message: str, exc_type: str = None) -> None:
    line = {"status": "error", "kind": kind, "message": message}
    if exc_type:
        line["type"] = exc_type
    print(json.dumps(line, sort_keys=True), file=sys.stderr)


def _lambda_arg(text: str):
    if text.lower() == "cv":
        return "cv"
    try:
        val = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number or 'cv', got {text!r}") from None
    if not val >= 0:
        raise argparse.ArgumentTypeError("lambda must be >= 0")
    return val


def _float_list(text: str) -> list:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _make_spec(args, family=None) -> ModelSpec:
    family = family or args.family
    penalty = CvGrid(folds=args.folds) if args.lam == "cv" else args.lam
    return ModelSpec(family=Family.parse(family), rank=args.rank, penalty=penalty)


def _load(args):
    return load_dataset(args.y, args.matrices, args.covariates, family=args.family)


def _check_ratio(data, rank: int) -> None:
    s_r = effective_params(data.m, data.p, data.q, rank)
    if data.n / s_r < RATIO_HEURISTIC:
        logger.warning(
            "n/s_r = %d/%d = %.2f is below %g; the sample may be too small for rank %d "
            "(a moderately large ratio, e.g. >= 5, is recommended)",
            data.n, s_r, data.n / s_r, RATIO_HEURISTIC, rank,
        )


def _data_meta(args) -> dict:
    return {"response": str(args.y), "matrices": str(args.matrices),
            "covariates": None if args.covariates is None else str(args.covariates)}


# ---------------------------------------------------------------------------
# verbs


def cmd_fit(args) -> int:
    data = _load(args)
    spec = _make_spec(args)
    spec.check_data(data)
    _check_ratio(data, args.rank)
    res = fit(data, spec, seed=args.seed)
    beta = res.beta_hat.to_vector()
    se = res.covariance.standard_errors(data.n)
    ci = confidence_intervals(beta, res.covariance, args.alpha, data.n)
    names = ["gamma"] + [f"xi_{k + 1}" for k in range(data.m)]
    names += [f"eta_{j + 1}_{k + 1}" for k in range(data.q) for j in range(data.p)]
    rows = [[nm, beta[i], se[i], ci[i, 0], ci[i, 1]] for i, nm in enumerate(names)]
    meta = {"verb": "fit", "spec": spec_metadata(spec), "seed": args.seed, "alpha": args.alpha,
            "lambda_used": res.lambda_used, "cv_table": res.cv_table, "s_r": res.s_r,
            "iterations": res.iterations, "converged": res.converged,
            "objective_trace": res.objective_trace, "sigma_sq_hat": res.sigma_sq_hat,
            "n": data.n, "m": data.m, "p": data.p, "q": data.q, "data": _data_meta(args),
            "version": __version__}
    write_table(args.out, ["parameter", "estimate", "std_error", "ci_lower", "ci_upper"],
                rows, meta)
    if not res.converged:
        _emit_error("numerical", f"alternating algorithm did not converge in "
                    f"{res.iterations} iterations; estimates written with converged=false",
                    "ConvergenceError")
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_cv(args) -> int:
    data = _load(args)
    spec = _make_spec(args)
    grid = CvGrid(candidates=args.grid, folds=args.folds)
    out = select_lambda_cv(data, spec, grid, seed=args.seed)
    rows = [[lam, score, lam == out.lambda_best] for lam, score in out.scores.items()]
    meta = {"verb": "cv", "spec": spec_metadata(spec), "seed": args.seed, "folds": args.folds,
            "lambda_best": out.lambda_best, "data": _data_meta(args), "version": __version__}
    write_table(args.out, ["lambda", "cv_loss", "selected"], rows, meta)
    return EXIT_OK


def _method(args, data):
    return default_method(data) if args.method == "auto" else Method(args.method)


def cmd_test(args) -> int:
    data = _load(args)
    spec = _make_spec(args)
    spec.check_data(data)
    _check_ratio(data, args.rank)
    method = _method(args, data)
    out = resampling_test(data, spec, args.stat, method, args.reps, args.seed,
                          lambda_mode=args.lambda_mode, residual=args.residual,
                          n_jobs=args.jobs)
    rows = [[k.value, r.observed, r.p_value, r.reps, r.failures, r.p_value <= args.alpha]
            for k, r in out.results.items()]
    meta = {"verb": "test", "spec": spec_metadata(spec), "method": method.value,
            "reps": args.reps, "seed": args.seed, "alpha": args.alpha,
            "lambda_used": out.lambda_used, "lambda_mode": args.lambda_mode,
            "residual": args.residual, "data": _data_meta(args), "version": __version__}
    write_table(args.out, ["statistic", "observed", "p_value", "replicates", "failed",
                           "reject"], rows, meta)
    return EXIT_OK


def cmd_analyze(args) -> int:
    data = _load(args)
    spec = _make_spec(args)
    spec.check_data(data)
    _check_ratio(data, args.rank)
    report = analyze(data, spec, args.stat, _method(args, data), args.reps, args.alpha,
                     args.seed, lambda_mode=args.lambda_mode, n_jobs=args.jobs)
    report.metadata["data"] = _data_meta(args)
    report.write(args.out)
    return EXIT_OK


def _scenario(args) -> ScenarioConfig:
    return ScenarioConfig(args.template, args.pattern, args.effect, args.n, args.replicates,
                          args.seed, args.noise_sigma)


def cmd_simulate(args) -> int:
    config = _scenario(args)
    family = config.family.value
    rank = args.rank if args.rank is not None else config.dims["rank"]
    if args.study == "dataset":
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        data, truth = generate_scenario(config, args.index)
        save_dataset(data, out / "y.csv", out / "matrices.csv",
                     out / "covariates.csv" if data.m else None)
        write_table(out / "truth.csv", ["index", "value"], list(enumerate(truth.to_vector())),
                    {"verb": "simulate", "study": "dataset", "config": config_metadata(config),
                     "replicate": args.index, "family": family, "version": __version__})
        return EXIT_OK
    args.rank = rank
    spec = _make_spec(args, family=family)
    if args.study == "estimation":
        report = run_estimation_study(config, spec, n_jobs=args.jobs)
    else:
        report = run_power_study(config, spec, args.stat, args.c_grid, args.reps,
                                 None if args.method == "auto" else args.method, args.alpha,
                                 args.lambda_mode, n_jobs=args.jobs)
    report.metadata["verb"] = "simulate"
    report.write(args.out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _add_model_args(p, family_required=True):
    p.add_argument("--family", choices=[f.value for f in Family], required=family_required)
    p.add_argument("--rank", type=int, required=family_required, help="rank r of eta")
    p.add_argument("--lambda", dest="lam", type=_lambda_arg, default="cv",
                   help="penalty value or 'cv' (default)")
    p.add_argument("--folds", type=int, default=5, help="CV folds (default 5)")
    p.add_argument("--seed", type=int, default=0)


def _add_data_args(p):
    p.add_argument("--y", required=True, type=Path, help="responses, one per line")
    p.add_argument("--matrices", required=True, type=Path,
                   help="'p q' header then one column-major row per subject")
    p.add_argument("--covariates", type=Path, default=None, help="confounders CSV (optional)")


def _add_resampling_args(p, reps=999):
    p.add_argument("--stat", action="append", type=StatisticKind.parse, default=None,
                   help="statistic (repeatable): wald, max, combined, gesat, combined-gesat")
    p.add_argument("--method", choices=["auto", "bootstrap", "permutation"], default="auto")
    p.add_argument("--reps", type=int, default=reps)
    p.add_argument("--lambda-mode", choices=["same", "frozen"], default="same")
    p.add_argument("--jobs", type=int, default=1, help="worker processes")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="lowrank-mcr", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    p = sub.add_parser("fit", help="fit the rank-r model and report intervals")
    _add_data_args(p)
    _add_model_args(p)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--out", required=True, type=Path)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("cv", help="cross-validate the penalty")
    _add_data_args(p)
    _add_model_args(p)
    p.add_argument("--grid", type=_float_list, default=None,
                   help="comma-separated candidates (default: size-based grid)")
    p.add_argument("--out", required=True, type=Path)
    p.set_defaults(func=cmd_cv)

    p = sub.add_parser("test", help="global test of eta = 0")
    _add_data_args(p)
    _add_model_args(p)
    _add_resampling_args(p)
    p.add_argument("--residual", choices=["literal", "mean"], default="literal")
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--out", required=True, type=Path)
    p.set_defaults(func=cmd_test)

    p = sub.add_parser("analyze", help="fit, intervals, global and per-cell tests")
    _add_data_args(p)
    _add_model_args(p)
    _add_resampling_args(p)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--out", required=True, type=Path, help="output directory")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("simulate", help="synthetic datasets and simulation studies")
    p.add_argument("study", choices=["dataset", "estimation", "power"])
    p.add_argument("--template", choices=[t.value for t in Template], required=True)
    p.add_argument("--pattern", choices=[e.value for e in EtaPattern],
                   default=EtaPattern.FIXED_CORNER.value)
    p.add_argument("--effect", type=float, default=1.0, help="effect size c")
    p.add_argument("--c-grid", type=_float_list, default=[0.0],
                   help="comma-separated effect sizes (power study)")
    p.add_argument("--n", type=int, default=None)
    p.add_argument("--replicates", type=int, default=100)
    p.add_argument("--index", type=int, default=0, help="replicate index (dataset)")
    p.add_argument("--noise-sigma", type=float, default=1.0)
    p.add_argument("--rank", type=int, default=None)
    p.add_argument("--lambda", dest="lam", type=_lambda_arg, default="cv")
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--alpha", type=float, default=0.05)
    _add_resampling_args(p, reps=199)
    p.add_argument("--out", required=True, type=Path)
    p.set_defaults(func=cmd_simulate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "stat", "unset") is None:
        args.stat = [StatisticKind.COMBINED, StatisticKind.COMBINED_GESAT, StatisticKind.GESAT]
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s", stream=sys.stderr)
    logging.captureWarnings(True)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            return args.func(args)
    except ValidationError as exc:
        _emit_error("input", str(exc), type(exc).__name__)
        return EXIT_INPUT
    except NumericalError as exc:
        _emit_error("numerical", str(exc), type(exc).__name__)
        return EXIT_NUMERIC
    except LowRankError as exc:  # pragma: no cover - base class fallback
        _emit_error("numerical", str(exc), type(exc).__name__)
        return EXIT_NUMERIC
    except OSError as exc:
        _emit_error("input", str(exc), type(exc).__name__)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
