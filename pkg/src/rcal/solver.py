"""Fitting propensity coefficients.

``fit_unpenalized`` runs damped Newton iterations and reports separation when
the loss keeps falling while fitted log-odds run off to infinity.
``fit_lasso`` implements the Fisher-scoring descent scheme for the
Lasso-penalized losses: each outer step minimizes a weighted least squares
surrogate plus the penalty (see :mod:`rcal.activeset`) and a backtracking
search along the segment to that minimizer enforces descent.
"""

from __future__ import annotations

import enum
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve
from scipy.special import expit

from .activeset import ActiveGramQR, solve_gram_lasso
from .data import Coefficients, DesignMatrix, _matrix, propensity, require_both_arms
from .errors import DomainError
from .losses import LossKind, loss_terms, loss_value


class Surrogate(str, enum.Enum):
    Q2 = "q2"
    Q3 = "q3"


class Status(str, enum.Enum):
    CONVERGED = "converged"
    SEPARATION = "separation"
    ITERATION_LIMIT = "iteration_limit"
    LINE_SEARCH_STALL = "line_search_stall"


@dataclass(frozen=True)
class SolverConfig:
    max_outer_iters: int = 1000
    outer_tol: float = 1e-9
    kkt_tol: float = 1e-8
    surrogate: Surrogate = Surrogate.Q3
    backtrack_shrink: float = 0.5
    backtrack_min_step: float = 2.0**-30
    predictor_cap: float = 30.0
    inner_max_active_updates: Optional[int] = None
    inner_tol: float = 1e-12

    def __post_init__(self):
        object.__setattr__(self, "surrogate", Surrogate(self.surrogate))
        if not (0.0 < self.backtrack_shrink < 1.0):
            raise ValueError("backtrack_shrink must lie in (0, 1)")
        for name in ("max_outer_iters", "outer_tol", "kkt_tol", "backtrack_min_step", "predictor_cap"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")


@dataclass(frozen=True)
class KktReport:
    """Stationarity residuals, i.e. the negated loss gradient.

    For CAL1, ``intercept_residual`` is E[T/pi] - 1 and ``box_residuals[j]``
    is E[(T/pi) f_j] - E[f_j].
    """

    intercept_residual: float
    box_residuals: np.ndarray
    active_set: tuple[int, ...]
    max_abs_box: float
    active_gap: float
    lam: float

    def passes(self, tol: float) -> bool:
        return (
            abs(self.intercept_residual) <= tol
            and self.max_abs_box <= self.lam + tol
            and self.active_gap <= tol
        )


@dataclass(frozen=True)
class FitResult:
    kind: LossKind
    coef: Coefficients
    pi_hat: np.ndarray
    loss: float
    penalized_loss: float
    lam: float
    status: Status
    kkt: KktReport
    iterations: int
    g_hat: np.ndarray = field(repr=False, default=None)
    trajectory: tuple[float, ...] = ()
    jittered: bool = False
    overflow: bool = False

    @property
    def converged(self) -> bool:
        return self.status is Status.CONVERGED

    def __post_init__(self):
        self.pi_hat.setflags(write=False)
        if self.g_hat is not None:
            self.g_hat.setflags(write=False)


def check_kkt(kind, design, treatment, coef, lam: float = 0.0) -> KktReport:
    """KKT residuals of the penalized loss at ``coef``.

    Residual j is minus the j-th gradient component; the active-set gap is
    the largest |residual_j - lam sign(gamma_j)| over nonzero coefficients.
    """
    kind = LossKind.parse(kind)
    f = _matrix(design)
    coef = coef if isinstance(coef, Coefficients) else Coefficients(coef)
    _, d, _ = loss_terms(kind, f @ coef.gamma, np.asarray(treatment, dtype=float))
    resid = -(f.T @ d) / f.shape[0]
    return _kkt_from_residuals(resid, coef, lam)


def _kkt_from_residuals(resid, coef: Coefficients, lam) -> KktReport:
    mask = coef.penalty_mask
    gamma = coef.gamma
    box = resid[1:]
    pen = mask[1:]
    active = tuple(int(j) for j in np.flatnonzero(mask & (gamma != 0)))
    max_abs_box = float(np.max(np.abs(box[pen]))) if pen.any() else 0.0
    gaps = [abs(resid[j] - lam * np.sign(gamma[j])) for j in active]
    # unpenalized non-intercept columns must be exactly stationary
    gaps += [abs(resid[j]) for j in range(1, len(gamma)) if not mask[j]]
    return KktReport(
        intercept_residual=float(resid[0]),
        box_residuals=box.copy(),
        active_set=active,
        max_abs_box=max_abs_box,
        active_gap=float(max(gaps)) if gaps else 0.0,
        lam=float(lam),
    )


def _make_result(kind, f, t, gamma, mask, lam, status, iterations, trajectory=(), jittered=False):
    coef = Coefficients(gamma, mask)
    g = f @ coef.gamma
    val, d, _ = loss_terms(kind, g, t)
    loss = float(np.mean(val))
    resid = -(f.T @ d) / f.shape[0]
    res = FitResult(
        kind=kind,
        coef=coef,
        pi_hat=propensity(g),
        loss=loss,
        penalized_loss=loss + lam * coef.l1_penalty(),
        lam=float(lam),
        status=status,
        kkt=_kkt_from_residuals(resid, coef, lam),
        iterations=iterations,
        g_hat=g,
        trajectory=tuple(trajectory),
        jittered=jittered,
        overflow=bool(np.any(np.abs(g) > 700.0)),
    )
    return res


def _intercept_start(f, t) -> np.ndarray:
    gamma = np.zeros(f.shape[1])
    tbar = float(np.clip(np.mean(t), 1e-12, 1 - 1e-12))
    if np.all(f[:, 0] == 1.0):
        gamma[0] = np.log(tbar) - np.log1p(-tbar)
    return gamma


def _default_mask(m):
    mask = np.ones(m, dtype=bool)
    mask[0] = False
    return mask


# ---------------------------------------------------------------------------
# unpenalized fits


def fit_unpenalized(kind, design, treatment, config: SolverConfig = SolverConfig(), start=None) -> FitResult:
    """Minimize the loss without penalty by damped Newton steps.

    Converged when the gradient max-norm is below ``kkt_tol``. Separation is
    reported when an accepted step lowers the loss while pushing some fitted
    log-odds beyond ``predictor_cap``, the numerical signature of a loss with
    no finite minimizer.
    """
    kind = LossKind.parse(kind)
    f = _matrix(design)
    t = np.asarray(treatment, dtype=float)
    n, m = f.shape
    mask = _default_mask(m)
    gamma = _intercept_start(f, t) if start is None else np.array(
        start.gamma if isinstance(start, Coefficients) else start, dtype=float)
    g = f @ gamma
    obj = loss_value(kind, g, t)
    trajectory = [obj]
    status = Status.ITERATION_LIMIT
    it = 0
    for it in range(1, config.max_outer_iters + 1):
        val, d, w = loss_terms(kind, g, t)
        grad = f.T @ d / n
        if np.max(np.abs(grad)) <= config.kkt_tol:
            status = Status.CONVERGED
            it -= 1
            break
        hess = (f.T * w) @ f / n
        ridge = 1e-12 * max(1.0, float(np.max(np.diag(hess))))
        try:
            step = -cho_solve(cho_factor(hess + ridge * np.eye(m)), grad)
        except LinAlgError:
            step = -np.linalg.lstsq(hess + ridge * np.eye(m), grad, rcond=None)[0]
        if not np.all(np.isfinite(step)) or grad @ step >= 0:
            step = -grad
        dg = f @ step
        # limit the change of any log-odds per iteration
        big = float(np.max(np.abs(dg)))
        if big > 10.0:
            step *= 10.0 / big
            dg *= 10.0 / big
        slope = float(grad @ step)
        tstep = 1.0
        while True:
            g_new = g + tstep * dg
            new_obj = loss_value(kind, g_new, t)
            if new_obj <= obj + 1e-4 * tstep * slope:
                break
            tstep *= config.backtrack_shrink
            if tstep < config.backtrack_min_step:
                break
        if tstep < config.backtrack_min_step:
            status = Status.LINE_SEARCH_STALL
            break
        gamma = gamma + tstep * step
        g = g_new
        decreased = new_obj < obj
        obj = new_obj
        trajectory.append(obj)
        if decreased and np.max(np.abs(g)) > config.predictor_cap:
            status = Status.SEPARATION
            break
    if status is Status.LINE_SEARCH_STALL:
        # a stall at a point that is stationary to tolerance is a convergence
        _, d, _ = loss_terms(kind, g, t)
        if np.max(np.abs(f.T @ d / n)) <= config.kkt_tol:
            status = Status.CONVERGED
    if status is Status.CONVERGED:
        gamma = _polish(kind, f, t, gamma)
    return _make_result(kind, f, t, gamma, mask, 0.0, status, it, trajectory)


def _polish(kind, f, t, gamma):
    """One full Newton step from a converged point, kept only if it lowers the
    gradient. Near the minimizer Newton converges quadratically, so this takes
    the stationarity residual from the stopping tolerance down to rounding."""
    n, m = f.shape
    _, d, w = loss_terms(kind, f @ gamma, t)
    grad = f.T @ d / n
    hess = (f.T * w) @ f / n
    try:
        cand = gamma - cho_solve(cho_factor(hess + 1e-14 * np.eye(m)), grad)
    except LinAlgError:
        return gamma
    if not np.all(np.isfinite(cand)):
        return gamma
    _, d_new, _ = loss_terms(kind, f @ cand, t)
    if np.max(np.abs(f.T @ d_new / n)) < np.max(np.abs(grad)):
        return cand
    return gamma


# ---------------------------------------------------------------------------
# Lasso-penalized fits


def surrogate_weights(kind: LossKind, g: np.ndarray, surrogate: Surrogate):
    """Curvature weights of the quadratic surrogate at log-odds ``g``.

    Returns a scalar when the weights are constant across observations, so the
    Gram matrix does not change between outer iterations.
    """
    if kind is LossKind.ML:
        return expit(g) * expit(-g)
    if kind is LossKind.BAL:
        return 1.0
    if surrogate is Surrogate.Q3:
        return 1.0
    if kind is LossKind.CAL1:
        return expit(-g)
    return expit(g)


def working_response(kind: LossKind, g, treatment, surrogate: Surrogate):
    """Working response and weights of the weighted least squares surrogate."""
    kind = LossKind.parse(kind)
    surrogate = Surrogate(surrogate)
    t = np.asarray(treatment, dtype=float)
    _, d, _ = loss_terms(kind, g, t)
    h = surrogate_weights(kind, g, surrogate)
    h = np.broadcast_to(np.asarray(h, dtype=float), g.shape)
    return g - d / h, h


class LassoProblem:
    """A penalized loss on fixed data, fit repeatedly along a lambda path.

    Keeps the Gram matrix and its active-set QR factors across fits when the
    surrogate weights are constant.
    """

    def __init__(self, kind, design, treatment, config: SolverConfig = SolverConfig(), penalty_mask=None):
        self.kind = LossKind.parse(kind)
        self.f = _matrix(design)
        self.t = np.asarray(treatment, dtype=float)
        self.config = config
        m = self.f.shape[1]
        self.mask = _default_mask(m) if penalty_mask is None else np.asarray(penalty_mask, dtype=bool)
        self._const_gram = None
        self._factor: Optional[ActiveGramQR] = None
        if isinstance(design, DesignMatrix) and design.p and not design.standardized:
            sd = design.values[:, 1:].std(axis=0, ddof=1)
            if np.any(np.abs(sd - 1.0) > 1e-6):
                warnings.warn("Lasso fit on a design that is not standardized", stacklevel=3)

    def _penalized(self, g, gamma, lam):
        return loss_value(self.kind, g, self.t) + lam * float(np.abs(gamma[self.mask]).sum())

    def _gram(self, h):
        n = self.f.shape[0]
        if np.ndim(h) == 0:
            if self._const_gram is None:
                self._const_gram = self.f.T @ self.f / n
            return self._const_gram if h == 1.0 else self._const_gram * float(h)
        return (self.f.T * h) @ self.f / n

    def fit(self, lam: float, warm_start=None) -> FitResult:
        if not lam > 0:
            raise DomainError("lambda must be positive")
        cfg = self.config
        kind, f, t, mask = self.kind, self.f, self.t, self.mask
        n = f.shape[0]
        if warm_start is None:
            gamma = _intercept_start(f, t)
        else:
            gamma = np.array(
                warm_start.gamma if isinstance(warm_start, Coefficients) else warm_start, dtype=float)
        g = f @ gamma
        obj = self._penalized(g, gamma, lam)
        trajectory = [obj]
        status = Status.ITERATION_LIMIT
        jittered = False
        it = 0
        _, d, _ = loss_terms(kind, g, t)
        if _kkt_from_residuals(-(f.T @ d) / n, Coefficients(gamma, mask), lam).passes(cfg.kkt_tol):
            return _make_result(kind, f, t, gamma, mask, lam, Status.CONVERGED, 0, trajectory)
        for it in range(1, cfg.max_outer_iters + 1):
            h = surrogate_weights(kind, g, cfg.surrogate)
            gram = self._gram(h)
            b = f.T @ (h * g - d) / n
            if np.ndim(h) == 0 and h == 1.0:
                factor = self._factor if self._factor is not None and self._factor.gram is gram else None
            else:
                factor = None
            target, factor = solve_gram_lasso(
                gram, b, lam, mask, x0=gamma, factor=factor,
                tol=cfg.inner_tol, max_steps=cfg.inner_max_active_updates,
            )
            if np.ndim(h) == 0 and h == 1.0:
                self._factor = factor
            jittered = jittered or factor.jittered
            step = target - gamma
            dg = f @ step
            tstep = 1.0
            accepted = False
            while tstep >= cfg.backtrack_min_step:
                cand = gamma + tstep * step
                g_new = g + tstep * dg
                new_obj = self._penalized(g_new, cand, lam)
                if new_obj < obj:
                    accepted = True
                    break
                tstep *= cfg.backtrack_shrink
            if not accepted:
                # at the rounding floor of the objective, take the surrogate
                # step when it improves stationarity
                cand, g_new = target, g + dg
                new_obj = self._penalized(g_new, cand, lam)
                _, d_new, _ = loss_terms(kind, g_new, t)
                old_rep = _kkt_from_residuals(-(f.T @ d) / n, Coefficients(gamma, mask), lam)
                new_rep = _kkt_from_residuals(-(f.T @ d_new) / n, Coefficients(cand, mask), lam)
                flat = new_obj - obj <= 1e-14 * max(1.0, abs(obj))
                if not (flat and _kkt_size(new_rep) < _kkt_size(old_rep)):
                    status = Status.LINE_SEARCH_STALL
                    break
            gamma, g, obj = cand, g_new, new_obj
            if accepted:
                trajectory.append(obj)
            _, d, _ = loss_terms(kind, g, t)
            rep = _kkt_from_residuals(-(f.T @ d) / n, Coefficients(gamma, mask), lam)
            # the objective test alone can stop early on flat stretches, so
            # convergence also requires the KKT conditions at kkt_tol
            if rep.passes(cfg.kkt_tol):
                status = Status.CONVERGED
                break
            # a decreasing objective that drives the log-odds past the cap is
            # the signature of a penalized loss with no finite minimizer
            if accepted and np.max(np.abs(g)) > cfg.predictor_cap:
                status = Status.SEPARATION
                break
        if status is Status.LINE_SEARCH_STALL:
            if check_kkt(kind, f, t, Coefficients(gamma, mask), lam).passes(cfg.kkt_tol):
                status = Status.CONVERGED
        return _make_result(kind, f, t, gamma, mask, lam, status, it, trajectory, jittered)


def _kkt_size(rep: KktReport) -> float:
    return max(abs(rep.intercept_residual), rep.max_abs_box - rep.lam, rep.active_gap)


def fit_lasso(kind, design, treatment, lam: float, config: SolverConfig = SolverConfig(), warm_start=None) -> FitResult:
    """Minimize loss(gamma) + lam * ||gamma_{1:p}||_1 by Fisher-scoring descent."""
    if _is_binary(treatment):
        require_both_arms(treatment)
    return LassoProblem(kind, design, treatment, config).fit(lam, warm_start)


def _is_binary(t) -> bool:
    t = np.asarray(t, dtype=float)
    return bool(np.all((t == 0) | (t == 1)))


def solve_wls_lasso(design, response, weights, lam: float, penalty_mask=None, warm_start=None, tol: float = 1e-12) -> Coefficients:
    """Exact minimizer of (1/2n) sum w_i (z_i - f_i'gamma)^2 + lam ||gamma_pen||_1."""
    f = _matrix(design)
    w = np.asarray(weights, dtype=float)
    if np.any(w < 0):
        raise DomainError("weights must be nonnegative")
    if lam < 0:
        raise DomainError("lambda must be nonnegative")
    z = np.asarray(response, dtype=float)
    n, m = f.shape
    mask = _default_mask(m) if penalty_mask is None else np.asarray(penalty_mask, dtype=bool)
    gram = (f.T * w) @ f / n
    b = f.T @ (w * z) / n
    x0 = None
    if warm_start is not None:
        x0 = warm_start.gamma if isinstance(warm_start, Coefficients) else warm_start
    x, _ = solve_gram_lasso(gram, b, lam, mask, x0=x0, tol=tol)
    return Coefficients(x, mask)
