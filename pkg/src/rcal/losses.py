"""Loss functions for logistic propensity fitting and related divergences.

All losses are sample averages over observations of a per-observation term in
the linear predictor g = gamma' f(X):

=====  ===========================================  ======================
kind   term                                         curvature in g
=====  ===========================================  ======================
ML     log(1 + e^g) - T g                           pi (1 - pi)
CAL1   T e^{-g} + (1 - T) g                         T e^{-g}
CAL0   (1 - T) e^{g} - T g                          (1 - T) e^{g}
BAL    CAL1 + CAL0                                  sum of the above
=====  ===========================================  ======================

``T`` may be any vector in [0, 1]; binary data is the usual case, while the
limiting fits substitute true propensities.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .data import Coefficients, _matrix, linear_predictor
from .errors import DomainError, PreconditionViolated

EXP_CAP = 700.0


class LossKind(str, enum.Enum):
    ML = "ml"
    CAL1 = "cal1"
    CAL0 = "cal0"
    BAL = "bal"

    @classmethod
    def parse(cls, value) -> "LossKind":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ValueError(
                f"unknown loss kind {value!r}; expected one of ml, cal1, cal0, bal"
            ) from None


@dataclass(frozen=True)
class LossEvaluation:
    value: float
    gradient: np.ndarray
    hessian_weights: np.ndarray
    overflow: bool = False

    def hessian(self, design) -> np.ndarray:
        f = _matrix(design)
        return (f.T * self.hessian_weights) @ f / f.shape[0]


def _exp(x):
    return np.exp(np.clip(x, -EXP_CAP, EXP_CAP))


def loss_terms(kind: LossKind, g: np.ndarray, t: np.ndarray):
    """Per-observation (value, derivative, curvature) of a loss in g."""
    if kind is LossKind.ML:
        val = np.logaddexp(0.0, g) - t * g
        pi = expit(g)
        return val, pi - t, pi * expit(-g)
    if kind is LossKind.CAL1:
        e = _exp(-g)
        return t * e + (1 - t) * g, 1 - t - t * e, t * e
    if kind is LossKind.CAL0:
        e = _exp(g)
        return (1 - t) * e - t * g, (1 - t) * e - t, (1 - t) * e
    if kind is LossKind.BAL:
        v1, d1, c1 = loss_terms(LossKind.CAL1, g, t)
        v0, d0, c0 = loss_terms(LossKind.CAL0, g, t)
        return v1 + v0, d1 + d0, c1 + c0
    raise ValueError(f"unknown loss kind {kind!r}")


def loss_value(kind: LossKind, g: np.ndarray, t: np.ndarray) -> float:
    """Average loss at linear predictor ``g``; value only."""
    if kind is LossKind.ML:
        return float(np.mean(np.logaddexp(0.0, g) - t * g))
    if kind is LossKind.CAL1:
        return float(np.mean(t * _exp(-g) + (1 - t) * g))
    if kind is LossKind.CAL0:
        return float(np.mean((1 - t) * _exp(g) - t * g))
    return loss_value(LossKind.CAL1, g, t) + loss_value(LossKind.CAL0, g, t)


def eval_loss(kind, design, treatment, coef) -> LossEvaluation:
    """Value, gradient and curvature weights of the loss at ``coef``.

    The Hessian is ``f' diag(hessian_weights) f / n``. When some
    ``|g_i| > 700`` the exponentials saturate and ``overflow`` is set.
    """
    kind = LossKind.parse(kind)
    f = _matrix(design)
    t = np.asarray(treatment, dtype=float)
    g = linear_predictor(f, coef)
    if kind is LossKind.BAL:
        e1 = eval_loss(LossKind.CAL1, f, t, coef)
        e0 = eval_loss(LossKind.CAL0, f, t, coef)
        return LossEvaluation(
            e1.value + e0.value,
            e1.gradient + e0.gradient,
            e1.hessian_weights + e0.hessian_weights,
            e1.overflow or e0.overflow,
        )
    val, d, w = loss_terms(kind, g, t)
    n = f.shape[0]
    return LossEvaluation(
        value=float(np.mean(val)),
        gradient=f.T @ d / n,
        hessian_weights=w,
        overflow=bool(np.any(np.abs(g) > EXP_CAP)),
    )


# ---------------------------------------------------------------------------
# scalar divergences between two probabilities


@dataclass(frozen=True)
class DivergenceTriple:
    L: float
    K: float
    Q: float


def _check_prob(name, value):
    if not (0.0 < value < 1.0):
        raise DomainError(f"{name} must lie in (0, 1), got {value!r}")


def _x_minus_1_minus_log(x):
    # x - 1 - log(x), with a series near x = 1 to avoid cancellation
    d = np.asarray(x, dtype=float) - 1.0
    series = d * d * (0.5 - d * (1 / 3 - d * (0.25 - d * (0.2 - d / 6))))
    return np.where(np.abs(d) < 1e-3, series, d - np.log1p(d))


def kl_divergence(rho, rho_prime):
    """rho' log(rho'/rho) + (1-rho') log((1-rho')/(1-rho)), nonnegative."""
    rho = np.asarray(rho, dtype=float)
    rp = np.asarray(rho_prime, dtype=float)
    return rp * np.log(rp / rho) + (1 - rp) * np.log((1 - rp) / (1 - rho))


def k_divergence(rho, rho_prime):
    return _x_minus_1_minus_log(np.asarray(rho_prime, dtype=float) / np.asarray(rho, dtype=float))


def q_divergence(rho, rho_prime):
    r = np.asarray(rho_prime, dtype=float) / np.asarray(rho, dtype=float)
    return (r - 1.0) ** 2


def divergences(rho: float, rho_prime: float) -> DivergenceTriple:
    """L (Kullback-Leibler), K (calibration) and Q (squared relative error).

    L is returned as the nonnegative divergence of rho from rho'.
    """
    _check_prob("rho", rho)
    _check_prob("rho_prime", rho_prime)
    return DivergenceTriple(
        L=float(max(kl_divergence(rho, rho_prime), 0.0)),
        K=float(k_divergence(rho, rho_prime)),
        Q=float(q_divergence(rho, rho_prime)),
    )


def prop4_bound_holds(rho: float, rho_prime: float, a: float) -> bool:
    """Whether Q(rho, rho') <= 5/(3a) K(rho, rho') given rho >= a rho'."""
    _check_prob("rho", rho)
    _check_prob("rho_prime", rho_prime)
    if not (0.0 < a <= 0.5):
        raise DomainError("a must lie in (0, 1/2]")
    if rho < a * rho_prime:
        raise PreconditionViolated(f"rho={rho} < a*rho'={a * rho_prime}")
    d = divergences(rho, rho_prime)
    return bool(d.Q <= 5.0 / (3.0 * a) * d.K)


# ---------------------------------------------------------------------------
# Bregman divergences of the population-form losses


def _kappa_terms(kind: str, g, t):
    if kind == "ml":
        return loss_terms(LossKind.ML, g, t)[:2]
    if kind == "cal":
        return loss_terms(LossKind.CAL1, g, t)[:2]
    raise ValueError("empirical_bregman kind must be 'ml' or 'cal'")


def empirical_bregman(kind, g, g_prime, treatment) -> float:
    """kappa(g) - kappa(g') - <grad kappa(g'), g - g'> for kind 'ml' or 'cal'."""
    kind = kind.value if isinstance(kind, LossKind) else str(kind).lower()
    if kind == "cal1":
        kind = "cal"
    g = np.asarray(g, dtype=float)
    gp = np.asarray(g_prime, dtype=float)
    t = np.asarray(treatment, dtype=float)
    v, _ = _kappa_terms(kind, g, t)
    vp, dp = _kappa_terms(kind, gp, t)
    return float(np.mean(v - vp - dp * (g - gp)))


def bregman_closed_form(kind, g, g_prime, treatment) -> float:
    """The same divergences written through L and K of the implied propensities."""
    kind = kind.value if isinstance(kind, LossKind) else str(kind).lower()
    pi = expit(np.asarray(g, dtype=float))
    pip = expit(np.asarray(g_prime, dtype=float))
    L = kl_divergence(pi, pip)
    if kind == "ml":
        return float(np.mean(L))
    t = np.asarray(treatment, dtype=float)
    return float(np.mean(t / pip * (k_divergence(pi, pip) + L)))


@dataclass(frozen=True)
class RiskMeasures:
    kappa_ml: float
    kappa_cal: float
    mse: float
    msre: float


def risk_measures(g_hat, g_star, treatment) -> RiskMeasures:
    """Sample estimates of the likelihood and calibration risks and of the
    squared absolute and relative propensity errors on the treated."""
    gh = np.asarray(g_hat, dtype=float)
    gs = np.asarray(g_star, dtype=float)
    t = np.asarray(treatment, dtype=float)
    pi_star = expit(gs)
    if np.any(pi_star <= 0.0) or np.any(pi_star >= 1.0):
        raise DomainError("true propensities must lie strictly inside (0, 1)")
    pi_hat = expit(gh)
    w = t / pi_star
    # pi*/pi_hat computed on the log-odds scale
    ratio = np.exp(np.logaddexp(0.0, -gh) - np.logaddexp(0.0, -gs))
    return RiskMeasures(
        kappa_ml=float(np.mean(np.logaddexp(0.0, gh) - pi_star * gh)),
        kappa_cal=float(np.mean(t * (_exp(-gh) - np.exp(-gs) * gh))),
        mse=float(np.mean(w * (pi_hat - pi_star) ** 2)),
        msre=float(np.mean(w * (ratio - 1.0) ** 2)),
    )


def mse_bound(c: float, delta: float, msre: float, n: int) -> float:
    """Upper bound on the mean squared error of the IPW mean."""
    if not (0.0 < delta < 1.0):
        raise DomainError("delta must lie in (0, 1)")
    if c <= 0 or msre < 0 or n < 1:
        raise DomainError("need c > 0, msre >= 0 and n >= 1")
    return c * msre + 2.0 / (n * delta) * c * (1.0 + msre)
