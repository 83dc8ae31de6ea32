"""Inverse probability weighted means, ATT, balance and weight diagnostics."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .data import Coefficients, _matrix
from .errors import ArmTooSmall, DegenerateWeights, ZeroVariance


class Orientation(str, enum.Enum):
    TREATED = "treated"
    UNTREATED = "untreated"


def _arm_weights(treatment, pi_hat, orientation):
    """Indicator of the arm and inverse probability weights on it (0 off-arm)."""
    t = np.asarray(treatment, dtype=float)
    pi = np.asarray(pi_hat, dtype=float)
    orientation = Orientation(orientation)
    if orientation is Orientation.TREATED:
        arm, p_arm = t, pi
    else:
        arm, p_arm = 1.0 - t, 1.0 - pi
    on = arm > 0
    if np.any(p_arm[on] <= 0.0) or np.any(p_arm[on] > 1.0):
        raise DegenerateWeights(f"{orientation.value} arm propensity outside (0, 1]")
    w = np.zeros_like(p_arm)
    w[on] = arm[on] / p_arm[on]
    return arm, w


@dataclass(frozen=True)
class WeightSet:
    orientation: Orientation
    weights: np.ndarray
    normalizer: float

    @classmethod
    def from_propensity(cls, treatment, pi_hat, orientation) -> "WeightSet":
        arm, w = _arm_weights(treatment, pi_hat, orientation)
        return cls(Orientation(orientation), w[arm > 0], float(np.mean(w)))


@dataclass(frozen=True)
class IpwMeans:
    ipw: float
    ripw: float


def ipw_means(treatment, outcome, pi_hat, orientation=Orientation.TREATED) -> IpwMeans:
    """Plain and ratio IPW estimates of the mean outcome in one arm."""
    arm, w = _arm_weights(treatment, pi_hat, orientation)
    if not np.any(arm > 0):
        raise ArmTooSmall("arm is empty")
    y = np.where(arm > 0, np.asarray(outcome, dtype=float), 0.0)
    ipw = float(np.mean(w * y))
    return IpwMeans(ipw=ipw, ripw=ipw / float(np.mean(w)))


def ripw_mean(treatment, values, pi_hat, orientation=Orientation.TREATED) -> float:
    return ipw_means(treatment, values, pi_hat, orientation).ripw


@dataclass(frozen=True)
class AttEstimate:
    nu1: float
    nu0_ipw: float
    nu0_ripw: float

    @property
    def att(self) -> float:
        return self.nu1 - self.nu0_ripw


def estimate_att(treatment, outcome, pi_hat) -> AttEstimate:
    """ATT from untreated outcomes weighted by the fitted odds pi/(1-pi)."""
    t = np.asarray(treatment, dtype=float)
    pi = np.asarray(pi_hat, dtype=float)
    y0 = np.where(t == 0, np.asarray(outcome, dtype=float), 0.0)
    y1 = np.where(t == 1, np.asarray(outcome, dtype=float), 0.0)
    if np.any(pi[t == 0] >= 1.0):
        raise DegenerateWeights("untreated propensity saturated at 1")
    odds = np.zeros_like(pi)
    odds[t == 0] = pi[t == 0] / (1.0 - pi[t == 0])
    tbar = float(np.mean(t))
    num = float(np.mean(odds * y0))
    return AttEstimate(
        nu1=float(np.mean(y1)) / tbar,
        nu0_ipw=num / tbar,
        nu0_ripw=num / float(np.mean(odds)),
    )


def entropy_balancing_weights(design, treatment, coef) -> np.ndarray:
    """Normalized untreated-arm weights exp(gamma_{1:p}' f_{1:p}) from a CAL0 fit.

    Returns an n-vector that is zero on the treated and sums to one.
    """
    f = _matrix(design)
    gamma = coef.gamma if isinstance(coef, Coefficients) else np.asarray(coef, dtype=float)
    t = np.asarray(treatment, dtype=float)
    s = f[:, 1:] @ gamma[1:]
    s = s - np.max(s[t == 0])
    w = np.where(t == 0, np.exp(s), 0.0)
    return w / w.sum()


def std_calibration_diff(design, treatment, pi_hat, orientation=Orientation.TREATED) -> np.ndarray:
    """(weighted arm mean of f_j - overall mean of f_j) / sd(f_j) for each column."""
    f = _matrix(design)[:, 1:]
    arm, w = _arm_weights(treatment, pi_hat, orientation)
    sd = f.std(axis=0, ddof=1)
    if np.any(sd == 0):
        raise ZeroVariance("constant design column")
    weighted = (w @ f) / w.sum()
    return (weighted - f.mean(axis=0)) / sd


def relative_variance(weights) -> float:
    """sum (w - wbar)^2 / ((n1 - 1) wbar^2) over one arm's weights."""
    w = np.asarray(weights, dtype=float)
    if w.shape[0] < 2:
        raise ArmTooSmall("relative variance needs at least two weights")
    wbar = w.mean()
    if wbar == 0:
        raise ZeroVariance("mean weight is zero")
    return float(np.sum((w - wbar) ** 2) / ((w.shape[0] - 1) * wbar**2))


def nominal_se(treatment, outcome, pi_hat, orientation=Orientation.TREATED) -> float:
    """Standard error of the ratio IPW mean with the weights held fixed."""
    arm, w = _arm_weights(treatment, pi_hat, orientation)
    if np.count_nonzero(arm > 0) < 1:
        raise ArmTooSmall("arm is empty")
    y = np.where(arm > 0, np.asarray(outcome, dtype=float), 0.0)
    n = w.shape[0]
    mu = float(np.mean(w * y)) / float(np.mean(w))
    resid = np.where(arm > 0, y - mu, 0.0)
    return float(np.sqrt(np.mean((w * resid) ** 2) / n) / np.mean(w))


@dataclass(frozen=True)
class EstimateReport:
    mu1_ipw: float
    mu1_ripw: float
    mu0_ipw: float
    mu0_ripw: float
    ate: float
    se_mu1: float
    se_mu0: float
    se_ate: float
    balance_treated: np.ndarray = field(repr=False)
    balance_untreated: np.ndarray = field(repr=False)
    relvar_treated: float = float("nan")
    relvar_untreated: float = float("nan")
    nu1: Optional[float] = None
    nu0_ipw: Optional[float] = None
    nu0_ripw: Optional[float] = None
    att: Optional[float] = None
    lambda_treated: Optional[float] = None
    lambda_untreated: Optional[float] = None

    def as_dict(self) -> dict:
        out = {}
        for k, v in self.__dict__.items():
            out[k] = v.tolist() if isinstance(v, np.ndarray) else v
        return out


def estimate_report(design, treatment, outcome, pi_treated, pi_untreated,
                    lambda_treated=None, lambda_untreated=None) -> EstimateReport:
    """Means, ATE and ATT using separately fitted propensities for each arm.

    ``pi_treated`` weights the treated arm (e.g. a CAL1 fit) and
    ``pi_untreated`` the untreated arm (e.g. a CAL0 fit); pass the same vector
    twice for a single model.
    """
    t = np.asarray(treatment, dtype=float)
    m1 = ipw_means(t, outcome, pi_treated, Orientation.TREATED)
    m0 = ipw_means(t, outcome, pi_untreated, Orientation.UNTREATED)
    se1 = nominal_se(t, outcome, pi_treated, Orientation.TREATED)
    se0 = nominal_se(t, outcome, pi_untreated, Orientation.UNTREATED)
    att = estimate_att(t, outcome, pi_untreated)
    _, w1 = _arm_weights(t, pi_treated, Orientation.TREATED)
    _, w0 = _arm_weights(t, pi_untreated, Orientation.UNTREATED)
    rv1 = relative_variance(w1[t == 1]) if np.sum(t == 1) >= 2 else float("nan")
    rv0 = relative_variance(w0[t == 0]) if np.sum(t == 0) >= 2 else float("nan")
    return EstimateReport(
        mu1_ipw=m1.ipw,
        mu1_ripw=m1.ripw,
        mu0_ipw=m0.ipw,
        mu0_ripw=m0.ripw,
        ate=m1.ripw - m0.ripw,
        se_mu1=se1,
        se_mu0=se0,
        se_ate=float(np.hypot(se1, se0)),
        balance_treated=std_calibration_diff(design, t, pi_treated, Orientation.TREATED),
        balance_untreated=std_calibration_diff(design, t, pi_untreated, Orientation.UNTREATED),
        relvar_treated=rv1,
        relvar_untreated=rv0,
        nu1=att.nu1,
        nu0_ipw=att.nu0_ipw,
        nu0_ripw=att.nu0_ripw,
        att=att.att,
        lambda_treated=lambda_treated,
        lambda_untreated=lambda_untreated,
    )
