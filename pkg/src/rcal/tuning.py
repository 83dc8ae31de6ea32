"""Lambda grids, the zero-solution threshold and K-fold cross-validation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import _matrix, require_both_arms
from .errors import DegenerateTreatment, DomainError, NoViableLambda
from .losses import LossKind, loss_terms, loss_value
from .solver import FitResult, LassoProblem, SolverConfig


def lambda_max(kind, design, treatment) -> float:
    """Smallest lambda at which all penalized coefficients are zero.

    The intercept-only fit of every loss kind has fitted propensity equal to
    the treated fraction; the threshold is the largest absolute gradient
    component over penalized columns at that fit.
    """
    kind = LossKind.parse(kind)
    f = _matrix(design)
    t = np.asarray(treatment, dtype=float)
    if np.all(t == t[0]):
        raise DegenerateTreatment("treatment is constant")
    pi0 = float(np.mean(t))
    g0 = np.full(f.shape[0], np.log(pi0) - np.log1p(-pi0))
    _, d, _ = loss_terms(kind, g0, t)
    grad = f.T @ d / f.shape[0]
    return float(np.max(np.abs(grad[1:]))) if f.shape[1] > 1 else 0.0


@dataclass(frozen=True)
class LambdaGrid:
    """Values lambda0 * 2^{-j/subdiv} for j = 0..depth."""

    lambda0: float
    depth: int = 10
    subdiv: int = 1
    values: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if not self.lambda0 > 0:
            raise DomainError("lambda0 must be positive")
        if self.depth < 0 or self.subdiv < 1:
            raise DomainError("need depth >= 0 and subdiv >= 1")
        v = self.lambda0 * self.ratios
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def ratios(self) -> np.ndarray:
        return 2.0 ** (-np.arange(self.depth + 1) / self.subdiv)

    def __len__(self):
        return self.depth + 1


def fold_assignment(n: int, k: int, seed: int) -> np.ndarray:
    """Random partition of range(n) into k near-equal folds."""
    if not 1 < k <= n:
        raise DomainError(f"need 2 <= folds <= n, got folds={k}, n={n}")
    perm = np.random.Generator(np.random.Philox(seed)).permutation(n)
    folds = np.empty(n, dtype=int)
    folds[perm] = np.arange(n) % k
    return folds


@dataclass(frozen=True)
class CvResult:
    grid: LambdaGrid
    cv_values: np.ndarray
    selected_lambda: float
    fold_assignment: np.ndarray
    seed: int
    fold_losses: np.ndarray = field(repr=False, default=None)
    fold_fits: tuple = field(repr=False, default=())

    @property
    def selected_index(self) -> int:
        return int(np.flatnonzero(self.grid.values == self.selected_lambda)[0])


def cross_validate(
    kind,
    design,
    treatment,
    grid: LambdaGrid,
    folds: int = 5,
    seed: int = 0,
    config: SolverConfig = SolverConfig(),
    keep_fits: bool = False,
) -> CvResult:
    """K-fold cross-validation of the unpenalized held-out loss.

    Each training fit runs down the grid with warm starts. A fold fit that
    does not converge scores +inf for that lambda. Ties go to the larger
    lambda.
    """
    kind = LossKind.parse(kind)
    f = _matrix(design)
    t = np.asarray(treatment, dtype=float)
    n = f.shape[0]
    assign = fold_assignment(n, folds, seed)
    lams = grid.values
    losses = np.full((len(lams), folds), np.inf)
    kept = []
    for k in range(folds):
        train = assign != k
        test = ~train
        fits = []
        try:
            require_both_arms(t[train])
        except DegenerateTreatment:
            kept.append(tuple(fits))
            continue
        problem = LassoProblem(kind, f[train], t[train], config)
        warm = None
        for i, lam in enumerate(lams):
            fit = problem.fit(lam, warm)
            fits.append(fit)
            if fit.converged:
                losses[i, k] = loss_value(kind, f[test] @ fit.coef.gamma, t[test])
                warm = fit.coef
        kept.append(tuple(fits) if keep_fits else ())
    cv = losses.mean(axis=1)
    if not np.any(np.isfinite(cv)):
        raise NoViableLambda("every lambda failed in at least one fold")
    best = int(np.argmin(cv))  # first minimum = largest lambda
    return CvResult(
        grid=grid,
        cv_values=cv,
        selected_lambda=float(lams[best]),
        fold_assignment=assign,
        seed=seed,
        fold_losses=losses,
        fold_fits=tuple(kept),
    )


def fit_cv(kind, design, treatment, folds: int = 5, seed: int = 0, depth: int = 10, subdiv: int = 1,
           config: SolverConfig = SolverConfig()) -> tuple[FitResult, CvResult]:
    """Cross-validate on the default grid below lambda_max, then refit on all data."""
    kind = LossKind.parse(kind)
    lam0 = lambda_max(kind, design, treatment)
    grid = LambdaGrid(lam0, depth=depth, subdiv=subdiv)
    cv = cross_validate(kind, design, treatment, grid, folds=folds, seed=seed, config=config)
    problem = LassoProblem(kind, design, treatment, config)
    warm = None
    fit = None
    # walk the path down to the selected value for a warm start
    for lam in grid.values[: cv.selected_index + 1]:
        fit = problem.fit(lam, warm)
        if fit.converged:
            warm = fit.coef
    return fit, cv
