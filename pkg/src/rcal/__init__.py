"""Regularized calibrated estimation of propensity scores."""

from .data import (
    Coefficients,
    Dataset,
    DesignMatrix,
    DesignSpec,
    Transform,
    build_design,
    linear_predictor,
    propensity,
    read_csv,
)
from .errors import RcalError
from .estimators import (
    EstimateReport,
    Orientation,
    entropy_balancing_weights,
    estimate_att,
    estimate_report,
    ipw_means,
    nominal_se,
    relative_variance,
    std_calibration_diff,
)
from .losses import LossKind, divergences, eval_loss, risk_measures
from .simulation import SimConfig, limiting_design, limiting_fit, run_monte_carlo
from .solver import FitResult, SolverConfig, Status, Surrogate, check_kkt, fit_lasso, fit_unpenalized
from .tuning import LambdaGrid, cross_validate, fit_cv, lambda_max

__version__ = "0.1.0"
