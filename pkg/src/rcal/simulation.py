"""Simulation study: data generator, limiting fits and the Monte Carlo driver.

Covariates are independent standard normals and the true propensity is

    pi*(X) = 1 / (1 + exp(X1 - 0.5 X2 + 0.25 X3 + 0.1 X4)).

In the correctly specified scenario the logistic model uses the raw ``X``; in
the misspecified scenario it uses standardized nonlinear transforms ``W`` of
the first four covariates. Each replicate draws its own stream from a Philox
generator keyed by a hash of ``(seed, rep)``, so a replicate is reproducible in
isolation and the run does not depend on how replicates are scheduled.
"""

from __future__ import annotations

import enum
import functools
import io
import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, ndtri

from .data import Coefficients
from .errors import ConfigError, RcalError
from .estimators import ripw_mean
from .losses import LossKind, risk_measures
from .solver import FitResult, SolverConfig, fit_unpenalized
from .tuning import fit_cv

H_CONFIGS = ("lin1", "lin2", "quad1", "quad2", "exp")
ESTIMATORS = ("True", "Const", "ML", "CAL", "RML", "RCAL")
QUADRATURE_DRAWS = 1_000_000
QUADRATURE_SEED = 20170419
TRUE_COEF = np.array([1.0, -0.5, 0.25, 0.1])


class Scenario(str, enum.Enum):
    CORRECT = "correct"
    MISSPECIFIED = "misspecified"


@dataclass(frozen=True)
class SimConfig:
    n: int = 200
    p: int = 4
    scenario: Scenario = Scenario.CORRECT
    h_configs: tuple = ("lin1",)
    n_reps: int = 100
    estimators: tuple = ESTIMATORS
    seed: int = 0
    cv_folds: int = 5
    grid_depth: int = 10
    grid_subdiv: int = 1
    solver: SolverConfig = field(default_factory=SolverConfig)

    def __post_init__(self):
        object.__setattr__(self, "scenario", Scenario(self.scenario))
        if isinstance(self.h_configs, str):
            object.__setattr__(self, "h_configs", (self.h_configs,))
        object.__setattr__(self, "h_configs", tuple(self.h_configs))
        object.__setattr__(self, "estimators", tuple(self.estimators))
        if self.p < 4:
            raise ConfigError("p must be at least 4")
        if self.n_reps < 1:
            raise ConfigError("n_reps must be at least 1")
        if self.n < 2 * self.cv_folds:
            raise ConfigError("n too small for the number of folds")
        for h in self.h_configs:
            if h not in H_CONFIGS + ("noise",):
                raise ConfigError(f"unknown h configuration {h!r}")
        for e in self.estimators:
            if e not in ESTIMATORS:
                raise ConfigError(f"unknown estimator {e!r}")
        if self.seed < 0:
            raise ConfigError("seed must be nonnegative")

    @property
    def outcome_configs(self) -> tuple:
        return tuple(h for h in self.h_configs if h != "noise")


@dataclass(frozen=True)
class SimReplicate:
    rep: int
    rep_seed: int
    X: np.ndarray
    pi_star: np.ndarray
    T: np.ndarray
    design: np.ndarray
    h_values: dict
    epsilon: np.ndarray

    @property
    def g_star(self) -> np.ndarray:
        return -(self.X[:, :4] @ TRUE_COEF)


def replicate_seed(seed: int, rep: int) -> int:
    """64-bit key for replicate ``rep`` derived from the run seed."""
    return int(np.random.SeedSequence([seed, rep]).generate_state(1, np.uint64)[0])


def true_propensity(X) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    return expit(-(X[:, :4] @ TRUE_COEF))


def misspecified_raw(X) -> np.ndarray:
    """Nonlinear transforms W of the covariates (unstandardized)."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    W = X.copy()
    W[:, 0] = np.exp(0.5 * X[:, 0])
    W[:, 1] = 10.0 + X[:, 1] / (1.0 + np.exp(X[:, 0]))
    W[:, 2] = (0.04 * X[:, 0] * X[:, 2] + 0.6) ** 3
    W[:, 3] = (X[:, 1] + X[:, 3] + 20.0) ** 2
    return W


def _standardize(x):
    return (x - x.mean(axis=0)) / x.std(axis=0, ddof=1)


def h_function(h_config: str, X) -> np.ndarray:
    """Outcome regression function evaluated at each row of ``X``."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[1] < 4:
        raise ConfigError("h functions need at least 4 covariates")
    x = X[:, :4]
    if h_config == "lin1":
        return x[:, 0] + 0.5 * (x[:, 1] + x[:, 2] + x[:, 3])
    if h_config == "lin2":
        return x[:, 0] + 2.0 * (x[:, 1] + x[:, 2] + x[:, 3])
    if h_config == "quad1":
        return np.sum(np.maximum(x, 0.0) ** 2, axis=1)
    if h_config == "quad2":
        return np.sum(np.maximum(-x, 0.0) ** 2, axis=1)
    if h_config == "exp":
        return np.sum(np.exp(x / 2.0), axis=1)
    if h_config == "noise":
        return np.zeros(X.shape[0])
    raise ConfigError(f"unknown h configuration {h_config!r}")


@functools.lru_cache(maxsize=None)
def h_mean(h_config: str) -> float:
    """E{h(X)} estimated from a fixed set of standard normal draws."""
    rng = np.random.Generator(np.random.Philox(QUADRATURE_SEED))
    x = rng.standard_normal((QUADRATURE_DRAWS, 4))
    return float(np.mean(h_function(h_config, x)))


def generate_replicate(config: SimConfig, rep: int) -> SimReplicate:
    key = replicate_seed(config.seed, rep)
    rng = np.random.Generator(np.random.Philox(key))
    X = rng.standard_normal((config.n, config.p))
    pi_star = true_propensity(X)
    T = (rng.random(config.n) < pi_star).astype(float)
    eps = rng.standard_normal(config.n)
    if config.scenario is Scenario.CORRECT:
        regressors = X
    else:
        regressors = _standardize(misspecified_raw(X))
    design = np.column_stack([np.ones(config.n), regressors])
    h_values = {h: h_function(h, X) for h in config.outcome_configs}
    return SimReplicate(rep, key, X, pi_star, T, design, h_values, eps)


# ---------------------------------------------------------------------------
# one replicate


@dataclass(frozen=True)
class ReplicateRecord:
    rep: int
    estimator: str
    converged: bool
    status: str
    lam: float
    nonzero: int
    mu_h: dict
    mu_eps: float
    risk_ml: float
    risk_cal: float
    mse: float
    msre: float

    def row(self, h_configs) -> list:
        return [self.rep, self.estimator, int(self.converged), self.status, self.lam, self.nonzero,
                *[self.mu_h.get(h, math.nan) for h in h_configs], self.mu_eps,
                self.risk_ml, self.risk_cal, self.mse, self.msre]


def _fit_estimator(name, rep: SimReplicate, config: SimConfig):
    """Fitted linear predictor and fit metadata for one estimator."""
    t = rep.T
    if name == "True":
        return rep.g_star, "converged", True, math.nan, 0
    if name == "Const":
        tbar = t.mean()
        return np.full_like(t, math.log(tbar) - math.log1p(-tbar)), "converged", True, math.nan, 0
    kind = LossKind.ML if name in ("ML", "RML") else LossKind.CAL1
    if name in ("ML", "CAL"):
        fit = fit_unpenalized(kind, rep.design, t, config.solver)
        lam = 0.0
    else:
        fit, cv = fit_cv(kind, rep.design, t, folds=config.cv_folds, seed=rep.rep_seed % (2**63),
                         depth=config.grid_depth, subdiv=config.grid_subdiv, config=config.solver)
        lam = cv.selected_lambda
    return fit.g_hat, fit.status.value, fit.converged, lam, fit.coef.nonzero_count()


def run_replicate(config: SimConfig, rep_index: int) -> list:
    rep = generate_replicate(config, rep_index)
    star = risk_measures(rep.g_star, rep.g_star, rep.T)
    out = []
    for name in config.estimators:
        try:
            g, status, ok, lam, nz = _fit_estimator(name, rep, config)
        except RcalError as exc:
            g, status, ok, lam, nz = None, type(exc).__name__, False, math.nan, 0
        if not ok:
            out.append(ReplicateRecord(rep_index, name, False, status, lam, nz, {}, math.nan,
                                       math.nan, math.nan, math.nan, math.nan))
            continue
        pi_hat = expit(g)
        mu_h = {h: ripw_mean(rep.T, v, pi_hat) for h, v in rep.h_values.items()}
        mu_eps = ripw_mean(rep.T, rep.epsilon, pi_hat)
        risk = risk_measures(g, rep.g_star, rep.T)
        out.append(ReplicateRecord(
            rep_index, name, True, status, lam, nz, mu_h, mu_eps,
            risk.kappa_ml - star.kappa_ml, risk.kappa_cal - star.kappa_cal, risk.mse, risk.msre,
        ))
    return out


def _run_chunk(args):
    config, reps = args
    return [r for i in reps for r in run_replicate(config, i)]


# ---------------------------------------------------------------------------
# aggregation


@dataclass(frozen=True)
class MetricRow:
    estimator: str
    used: int
    nonconverged: int
    rmse_h: dict
    rmse_eps: float
    risk_ml: float
    risk_cal: float
    diff: float
    rdiff: float
    avg_nonzero: float


@dataclass(frozen=True)
class MetricTable:
    config: SimConfig
    rows: tuple
    h_means: dict

    def row(self, estimator: str) -> MetricRow:
        for r in self.rows:
            if r.estimator == estimator:
                return r
        raise KeyError(estimator)

    @property
    def columns(self) -> list:
        return (["estimator", "used", "nonconverged"]
                + [f"rmse_{h}" for h in self.config.outcome_configs]
                + ["rmse_eps", "riskML", "riskCAL", "diff", "rdiff", "avg_nonzero"])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.columns)
        for r in self.rows:
            w.writerow([r.estimator, r.used, r.nonconverged,
                        *[_fmt(r.rmse_h[h]) for h in self.config.outcome_configs],
                        _fmt(r.rmse_eps), _fmt(r.risk_ml), _fmt(r.risk_cal), _fmt(r.diff),
                        _fmt(r.rdiff), _fmt(r.avg_nonzero)])
        return buf.getvalue()


def _fmt(x) -> str:
    return format(float(x), ".17g")


def _rms(values) -> float:
    v = np.asarray(values, dtype=float)
    return float(np.sqrt(np.mean(v * v))) if v.size else math.nan


def aggregate(config: SimConfig, records) -> MetricTable:
    """Root mean squared errors and risks per estimator, over converged replicates."""
    records = sorted(records, key=lambda r: (r.rep, config.estimators.index(r.estimator)))
    h_means = {h: h_mean(h) for h in config.outcome_configs}
    rows = []
    for name in config.estimators:
        mine = [r for r in records if r.estimator == name]
        ok = [r for r in mine if r.converged]
        rows.append(MetricRow(
            estimator=name,
            used=len(ok),
            nonconverged=len(mine) - len(ok),
            rmse_h={h: _rms([r.mu_h[h] - h_means[h] for r in ok]) for h in config.outcome_configs},
            rmse_eps=_rms([r.mu_eps for r in ok]),
            risk_ml=_rms([r.risk_ml for r in ok]),
            risk_cal=_rms([r.risk_cal for r in ok]),
            diff=_rms([r.mse for r in ok]),
            rdiff=_rms([r.msre for r in ok]),
            avg_nonzero=float(np.mean([r.nonzero for r in ok])) if ok else math.nan,
        ))
    return MetricTable(config, tuple(rows), h_means)


@dataclass(frozen=True)
class MonteCarloRun:
    table: MetricTable
    records: tuple
    rep_seeds: tuple

    def records_csv(self) -> str:
        hs = self.table.config.outcome_configs
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["rep", "estimator", "converged", "status", "lambda", "nonzero",
                    *[f"mu_{h}" for h in hs], "mu_eps", "riskML", "riskCAL", "mse", "msre"])
        for r in self.records:
            w.writerow([_fmt(v) if isinstance(v, float) else v for v in r.row(hs)])
        return buf.getvalue()


def run_monte_carlo(config: SimConfig, workers: int = 1) -> MonteCarloRun:
    """Run every replicate and aggregate. Results do not depend on ``workers``."""
    reps = list(range(config.n_reps))
    if workers <= 1:
        records = [r for i in reps for r in run_replicate(config, i)]
    else:
        chunks = [(config, reps[k::workers]) for k in range(workers)]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            records = [r for part in pool.map(_run_chunk, chunks) for r in part]
    records = sorted(records, key=lambda r: (r.rep, config.estimators.index(r.estimator)))
    return MonteCarloRun(
        table=aggregate(config, records),
        records=tuple(records),
        rep_seeds=tuple(replicate_seed(config.seed, i) for i in reps),
    )


# ---------------------------------------------------------------------------
# limiting propensities on a fixed design


def limiting_fit(kind, design, pi_star, config: SolverConfig = SolverConfig()) -> FitResult:
    """Minimize the loss with the treatment indicators replaced by ``pi_star``."""
    pi_star = np.asarray(pi_star, dtype=float)
    if np.any(pi_star <= 0.0) or np.any(pi_star >= 1.0):
        raise ConfigError("pi_star must lie strictly inside (0, 1)")
    return fit_unpenalized(kind, design, pi_star, config)


@dataclass(frozen=True)
class LimitingSetup:
    x: np.ndarray
    design: np.ndarray
    pi_star: np.ndarray


def limiting_design(n_points: int = 400) -> LimitingSetup:
    """Normal quantiles x_i at i/(n+1), regressor exp(x/2), pi* = 1/(1+e^x)."""
    x = ndtri(np.arange(1, n_points + 1) / (n_points + 1))
    design = np.column_stack([np.ones(n_points), np.exp(x / 2.0)])
    return LimitingSetup(x, design, expit(-x))


@dataclass(frozen=True)
class LimitingResult:
    kind: str
    coef: Coefficients
    pi_bar: np.ndarray
    msre: float
    mse: float
    converged: bool


def limiting_experiment(kinds=("ml", "cal1", "bal"), setup: LimitingSetup | None = None) -> dict:
    """Limiting fits on the fixed design with their relative errors against pi*."""
    setup = limiting_design() if setup is None else setup
    out = {}
    for kind in kinds:
        fit = limiting_fit(kind, setup.design, setup.pi_star)
        pi_bar = fit.pi_hat
        out[str(LossKind.parse(kind).value)] = LimitingResult(
            kind=LossKind.parse(kind).value,
            coef=fit.coef,
            pi_bar=pi_bar,
            msre=float(np.mean((setup.pi_star / pi_bar - 1.0) ** 2)),
            mse=float(np.mean((setup.pi_star - pi_bar) ** 2)),
            converged=fit.converged,
        )
    return out
