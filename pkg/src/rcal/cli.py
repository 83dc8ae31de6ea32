"""Command-line interface.

Subcommands: ``fit``, ``cv``, ``estimate``, ``diagnose``, ``simulate`` and
``limiting``. Options may also come from a JSON config file (``--config``)
whose keys are the long option names with dashes replaced by underscores;
options given on the command line take precedence. Unknown keys are errors.

Exit codes: 0 on success with a converged fit, 2 when a fit did not converge
(its output is still written), 1 on input, validation or I/O errors.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import math
import os
import platform
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import __version__
from .data import DesignSpec, build_design, read_csv
from .errors import RcalError
from .estimators import (
    Orientation,
    estimate_report,
    relative_variance,
    std_calibration_diff,
    _arm_weights,
)
from .losses import LossKind
from .simulation import ESTIMATORS, SimConfig, limiting_experiment, run_monte_carlo
from .solver import FitResult, SolverConfig, fit_lasso, fit_unpenalized
from .tuning import fit_cv, lambda_max

EXIT_OK, EXIT_ERROR, EXIT_NONCONVERGED = 0, 1, 2


class CliError(Exception):
    """Validation problem in the command line or config file."""


# ---------------------------------------------------------------------------
# output helpers


def _jsonable(value):
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return [_jsonable(v) for v in value.tolist()]
    if isinstance(value, (np.floating, float)):
        v = float(value)
        return v if math.isfinite(v) else repr(v)
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.bool_,)):
        return bool(value)
    if hasattr(value, "value") and isinstance(getattr(value, "value"), str):
        return value.value
    return value


def dumps(obj) -> str:
    # json writes floats with repr, which round-trips doubles exactly
    return json.dumps(_jsonable(obj), indent=2, sort_keys=False) + "\n"


def write_atomic(path, text: str) -> None:
    """Write ``text`` to ``path`` through a temporary file and rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _emit(opts, text: str) -> None:
    if opts.get("output"):
        write_atomic(opts["output"], text)
    else:
        sys.stdout.write(text)


def _pi_csv(pi) -> str:
    return "pi_hat\n" + "".join(format(float(v), ".17g") + "\n" for v in pi)


def read_pi(path) -> np.ndarray:
    """Fitted propensities from a CSV with a ``pi_hat`` column or a fit JSON report."""
    path = Path(path)
    if path.suffix.lower() == ".json":
        data = json.loads(path.read_text(encoding="utf-8"))
        if "pi_hat" not in data:
            raise CliError(f"{path}: no pi_hat entry")
        return np.array(data["pi_hat"], dtype=float)
    lines = [ln.strip() for ln in path.read_text(encoding="utf-8").splitlines() if ln.strip()]
    header = [h.strip() for h in lines[0].split(",")]
    if "pi_hat" not in header:
        raise CliError(f"{path}: no pi_hat column")
    j = header.index("pi_hat")
    return np.array([float(ln.split(",")[j]) for ln in lines[1:]])


# ---------------------------------------------------------------------------
# option handling

DEFAULTS = {
    "config": None,
    "input": None,
    "treatment": None,
    "outcome": None,
    "covariates": None,
    "terms": None,
    "interactions": False,
    "standardize": True,
    "min_nonzero_count": 0,
    "loss": "cal1",
    "lam": None,
    "cv_folds": 5,
    "grid_depth": 10,
    "grid_subdiv": 1,
    "seed": 0,
    "solver": None,
    "output": None,
    "pi_output": None,
    "pi_file": None,
    "lambda_mode": "per-arm",
    # simulation
    "n": 200,
    "p": 4,
    "scenario": "correct",
    "h": "lin1",
    "reps": 100,
    "estimators": ",".join(ESTIMATORS),
    "workers": 1,
    "records": None,
    "manifest": None,
}


def _add_data_options(sp):
    sp.add_argument("--input", help="CSV file with a header row")
    sp.add_argument("--treatment", help="name of the 0/1 treatment column")
    sp.add_argument("--outcome", help="name of the outcome column")
    sp.add_argument("--covariates", help="comma-separated covariate columns (default: all others)")
    sp.add_argument("--interactions", action="store_true", help="add all pairwise products")
    sp.add_argument("--standardize", dest="standardize", action="store_true")
    sp.add_argument("--no-standardize", dest="standardize", action="store_false")
    sp.add_argument("--min-nonzero-count", type=int, dest="min_nonzero_count",
                    help="drop columns with fewer nonzero entries")


def _add_fit_options(sp, choices=("ml", "cal1", "cal0", "bal")):
    sp.add_argument("--loss", choices=choices)
    sp.add_argument("--lambda", type=float, dest="lam", help="Lasso tuning parameter")
    sp.add_argument("--cv-folds", type=int, dest="cv_folds")
    sp.add_argument("--grid-depth", type=int, dest="grid_depth")
    sp.add_argument("--grid-subdiv", type=int, dest="grid_subdiv")
    sp.add_argument("--seed", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rcal", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"rcal {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_):
        sp = sub.add_parser(name, help=help_, argument_default=argparse.SUPPRESS)
        sp.add_argument("--config", help="JSON file of option values")
        sp.add_argument("--output", help="write the report here instead of stdout")
        return sp

    sp = add("fit", "fit a propensity model at a fixed lambda (0 = unpenalized)")
    _add_data_options(sp)
    _add_fit_options(sp)
    sp.add_argument("--pi-output", dest="pi_output", help="CSV file for the fitted propensities")

    sp = add("cv", "choose lambda by K-fold cross-validation and refit")
    _add_data_options(sp)
    _add_fit_options(sp)
    sp.add_argument("--pi-output", dest="pi_output")

    sp = add("estimate", "IPW means, ATE and ATT")
    _add_data_options(sp)
    _add_fit_options(sp)
    sp.add_argument("--pi-file", dest="pi_file", help="use these fitted propensities instead of fitting")
    sp.add_argument("--lambda-mode", dest="lambda_mode", choices=("per-arm", "shared"))

    sp = add("diagnose", "standardized calibration differences and weight variability")
    _add_data_options(sp)
    _add_fit_options(sp)
    sp.add_argument("--pi-file", dest="pi_file")

    sp = add("simulate", "Monte Carlo study")
    sp.add_argument("--n", type=int)
    sp.add_argument("--p", type=int)
    sp.add_argument("--scenario", choices=("correct", "misspecified"))
    sp.add_argument("--h", help="comma-separated outcome functions (lin1,lin2,quad1,quad2,exp)")
    sp.add_argument("--reps", type=int)
    sp.add_argument("--estimators", help="comma-separated subset of " + ",".join(ESTIMATORS))
    sp.add_argument("--seed", type=int)
    sp.add_argument("--workers", type=int, help="worker processes")
    sp.add_argument("--cv-folds", type=int, dest="cv_folds")
    sp.add_argument("--grid-depth", type=int, dest="grid_depth")
    sp.add_argument("--grid-subdiv", type=int, dest="grid_subdiv")
    sp.add_argument("--records", help="CSV file for per-replicate results")
    sp.add_argument("--manifest", help="JSON file describing the run")

    add("limiting", "limiting propensities on the fixed 400-point design")
    return parser


def resolve_options(args: argparse.Namespace) -> dict:
    given = vars(args).copy()
    command = given.pop("command")
    opts = dict(DEFAULTS)
    if given.get("config"):
        try:
            cfg = json.loads(Path(given["config"]).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise CliError(f"config file is not valid JSON: {exc}") from None
        if not isinstance(cfg, dict):
            raise CliError("config file must hold a JSON object")
        if "lambda" in cfg:
            cfg["lam"] = cfg.pop("lambda")
        unknown = sorted(set(cfg) - set(DEFAULTS) - {"config"})
        if unknown:
            raise CliError(f"unknown config keys: {', '.join(unknown)}")
        opts.update(cfg)
    opts.update(given)
    opts["command"] = command
    return opts


def _solver_config(opts) -> SolverConfig:
    extra = opts.get("solver") or {}
    if not isinstance(extra, dict):
        raise CliError("solver must be an object of solver settings")
    names = {f.name for f in dataclasses.fields(SolverConfig)}
    unknown = sorted(set(extra) - names)
    if unknown:
        raise CliError(f"unknown solver keys: {', '.join(unknown)}")
    return SolverConfig(**extra)


def _split(value):
    if value is None:
        return None
    if isinstance(value, str):
        return [v.strip() for v in value.split(",") if v.strip()]
    return list(value)


def load_design(opts):
    if not opts.get("input"):
        raise CliError("--input is required")
    if not opts.get("treatment"):
        raise CliError("--treatment is required")
    data = read_csv(opts["input"], opts["treatment"], opts.get("outcome"), _split(opts.get("covariates")))
    if opts.get("terms") is not None:
        terms = tuple(t if isinstance(t, str) else tuple(t) for t in opts["terms"])
        spec = DesignSpec(terms=terms, standardize=bool(opts["standardize"]),
                          min_nonzero_count=int(opts["min_nonzero_count"]))
    elif opts.get("interactions"):
        spec = DesignSpec.full(data.covariate_names, interactions=True,
                               standardize=bool(opts["standardize"]),
                               min_nonzero_count=int(opts["min_nonzero_count"]))
    else:
        spec = DesignSpec(standardize=bool(opts["standardize"]),
                          min_nonzero_count=int(opts["min_nonzero_count"]))
    return data, build_design(data, spec)


# ---------------------------------------------------------------------------
# reports


def fit_report(fit: FitResult, design, lam0=None) -> dict:
    names = design.column_names
    return {
        "kind": fit.kind.value,
        "status": fit.status.value,
        "converged": fit.converged,
        "lambda": fit.lam,
        "lambda_max": lam0,
        "iterations": fit.iterations,
        "loss": fit.loss,
        "penalized_loss": fit.penalized_loss,
        "coefficients": {names[j]: float(fit.coef.gamma[j]) for j in range(len(names))},
        "nonzero": fit.coef.nonzero_count(),
        "kkt": {
            "intercept_residual": fit.kkt.intercept_residual,
            "box_residuals": {names[j + 1]: float(r) for j, r in enumerate(fit.kkt.box_residuals)},
            "active_set": [names[j] for j in fit.kkt.active_set],
            "max_abs_box": fit.kkt.max_abs_box,
            "active_gap": fit.kkt.active_gap,
        },
        "dropped_columns": list(design.dropped),
        "jittered": fit.jittered,
        "overflow": fit.overflow,
        "pi_hat": fit.pi_hat,
    }


def _fit_fixed(kind, design, t, lam, solver):
    if lam is None or lam == 0:
        return fit_unpenalized(kind, design, t, solver)
    if lam < 0:
        raise CliError("--lambda must be nonnegative")
    return fit_lasso(kind, design, t, lam, solver)


def _fit_cv(kind, design, t, opts, solver):
    return fit_cv(kind, design, t, folds=int(opts["cv_folds"]), seed=int(opts["seed"]),
                  depth=int(opts["grid_depth"]), subdiv=int(opts["grid_subdiv"]), config=solver)


def _lam0(kind, design, t):
    try:
        return lambda_max(kind, design, t)
    except RcalError:
        return None


def cmd_fit(opts) -> int:
    data, design = load_design(opts)
    kind = LossKind.parse(opts["loss"])
    fit = _fit_fixed(kind, design, data.treatment, opts.get("lam"), _solver_config(opts))
    _emit(opts, dumps(fit_report(fit, design, _lam0(kind, design, data.treatment))))
    if opts.get("pi_output"):
        write_atomic(opts["pi_output"], _pi_csv(fit.pi_hat))
    return EXIT_OK if fit.converged else EXIT_NONCONVERGED


def cmd_cv(opts) -> int:
    data, design = load_design(opts)
    kind = LossKind.parse(opts["loss"])
    fit, cv = _fit_cv(kind, design, data.treatment, opts, _solver_config(opts))
    report = fit_report(fit, design, cv.grid.lambda0)
    report["cv"] = {
        "folds": int(opts["cv_folds"]),
        "seed": cv.seed,
        "grid": cv.grid.values,
        "cv_values": cv.cv_values,
        "selected_lambda": cv.selected_lambda,
        "selected_index": cv.selected_index,
        "fold_assignment": cv.fold_assignment,
    }
    _emit(opts, dumps(report))
    if opts.get("pi_output"):
        write_atomic(opts["pi_output"], _pi_csv(fit.pi_hat))
    return EXIT_OK if fit.converged else EXIT_NONCONVERGED


def _arm_fits(opts, design, t):
    """Propensity fits for the treated and untreated arms, with their lambdas."""
    solver = _solver_config(opts)
    kind = LossKind.parse(opts["loss"])
    if kind in (LossKind.CAL1, LossKind.CAL0):
        kinds = (LossKind.CAL1, LossKind.CAL0)
    else:
        kinds = (kind, kind)
    lam = opts.get("lam")
    if lam is not None:
        fits = [_fit_fixed(k, design, t, lam, solver) for k in kinds]
        return fits, [lam, lam]
    if kinds[0] is kinds[1]:
        fit, cv = _fit_cv(kinds[0], design, t, opts, solver)
        return [fit, fit], [cv.selected_lambda] * 2
    fits, lams = [], []
    for k in kinds:
        fit, cv = _fit_cv(k, design, t, opts, solver)
        fits.append(fit)
        lams.append(cv.selected_lambda)
    if opts.get("lambda_mode") == "shared":
        # one common value for both arms: the smaller of the per-arm choices
        shared = min(lams)
        fits = [fit_lasso(k, design, t, shared, solver) for k in kinds]
        lams = [shared, shared]
    return fits, lams


def cmd_estimate(opts) -> int:
    data, design = load_design(opts)
    if data.outcome is None:
        raise CliError("--outcome is required for estimate")
    t = data.treatment
    if opts.get("pi_file"):
        pi = read_pi(opts["pi_file"])
        if pi.shape[0] != data.n:
            raise CliError("pi_hat length differs from the number of rows")
        pis, lams, converged = [pi, pi], [None, None], True
    else:
        fits, lams = _arm_fits(opts, design, t)
        pis = [f.pi_hat for f in fits]
        converged = all(f.converged for f in fits)
    rep = estimate_report(design, t, data.outcome, pis[0], pis[1], lams[0], lams[1])
    out = rep.as_dict()
    out["balance_treated"] = dict(zip(design.column_names[1:], rep.balance_treated.tolist()))
    out["balance_untreated"] = dict(zip(design.column_names[1:], rep.balance_untreated.tolist()))
    out["converged"] = converged
    _emit(opts, dumps(out))
    return EXIT_OK if converged else EXIT_NONCONVERGED


def cmd_diagnose(opts) -> int:
    data, design = load_design(opts)
    t = data.treatment
    names = design.column_names[1:]
    report = {}
    active = []
    converged = True
    if opts.get("pi_file"):
        pi = read_pi(opts["pi_file"])
        if pi.shape[0] != data.n:
            raise CliError("pi_hat length differs from the number of rows")
        report["source"] = str(opts["pi_file"])
    else:
        kind = LossKind.parse(opts["loss"])
        solver = _solver_config(opts)
        if opts.get("lam") is not None:
            fit = _fit_fixed(kind, design, t, opts["lam"], solver)
        else:
            fit, _ = _fit_cv(kind, design, t, opts, solver)
        pi = fit.pi_hat
        active = [names[j - 1] for j in fit.kkt.active_set if j > 0]
        converged = fit.converged
        report.update({"kind": kind.value, "lambda": fit.lam, "status": fit.status.value,
                       "nonzero": fit.coef.nonzero_count()})
    for orient in (Orientation.TREATED, Orientation.UNTREATED):
        arm = t if orient is Orientation.TREATED else 1 - t
        diff = std_calibration_diff(design, t, pi, orient)
        _, w = _arm_weights(t, pi, orient)
        w_arm = w[arm > 0]
        report[orient.value] = {
            "std_calibration_diff": dict(zip(names, diff.tolist())),
            "max_abs": float(np.max(np.abs(diff))) if diff.size else 0.0,
            "relative_variance": relative_variance(w_arm) if w_arm.size >= 2 else None,
        }
    report["active_set"] = active
    report["converged"] = converged
    _emit(opts, dumps(report))
    return EXIT_OK if converged else EXIT_NONCONVERGED


def cmd_simulate(opts) -> int:
    try:
        config = SimConfig(
            n=int(opts["n"]), p=int(opts["p"]), scenario=opts["scenario"],
            h_configs=tuple(_split(opts["h"])), n_reps=int(opts["reps"]),
            estimators=tuple(_split(opts["estimators"])), seed=int(opts["seed"]),
            cv_folds=int(opts["cv_folds"]), grid_depth=int(opts["grid_depth"]),
            grid_subdiv=int(opts["grid_subdiv"]), solver=_solver_config(opts),
        )
    except ValueError as exc:
        raise CliError(str(exc)) from None
    run = run_monte_carlo(config, workers=int(opts["workers"]))
    _emit(opts, run.table.to_csv())
    if opts.get("records"):
        write_atomic(opts["records"], run.records_csv())
    if opts.get("manifest"):
        import scipy
        manifest = {
            "config": {
                **{f.name: getattr(config, f.name) for f in dataclasses.fields(config) if f.name != "solver"},
                "solver": dataclasses.asdict(config.solver),
            },
            "rng": "numpy Philox keyed by SeedSequence([seed, rep])",
            "rep_seeds": list(run.rep_seeds),
            "h_means": run.table.h_means,
            "versions": {"rcal": __version__, "python": platform.python_version(),
                         "numpy": np.__version__, "scipy": scipy.__version__},
        }
        write_atomic(opts["manifest"], dumps(manifest))
    return EXIT_OK


def cmd_limiting(opts) -> int:
    res = limiting_experiment()
    out = {k: {"coefficients": r.coef.gamma, "msre": r.msre, "mse": r.mse, "converged": r.converged}
           for k, r in res.items()}
    _emit(opts, dumps(out))
    return EXIT_OK if all(r.converged for r in res.values()) else EXIT_NONCONVERGED


COMMANDS = {
    "fit": cmd_fit,
    "cv": cmd_cv,
    "estimate": cmd_estimate,
    "diagnose": cmd_diagnose,
    "simulate": cmd_simulate,
    "limiting": cmd_limiting,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        opts = resolve_options(args)
        return COMMANDS[opts["command"]](opts)
    except (CliError, RcalError, KeyError, ValueError, OSError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else str(exc)
        msg = " ".join(str(msg).split())
        sys.stderr.write(f"error: {type(exc).__name__}: {msg}\n")
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
