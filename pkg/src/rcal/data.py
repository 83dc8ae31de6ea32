"""Datasets, design matrices and the logistic link."""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np
from scipy.special import expit

from .errors import DegenerateTreatment, DimensionMismatch, EmptyDesign, NonFinite


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Dataset:
    """Treatment indicators, optional outcomes and raw covariates for n subjects."""

    treatment: np.ndarray
    covariates: np.ndarray
    covariate_names: tuple[str, ...]
    outcome: Optional[np.ndarray] = None

    def __post_init__(self):
        t = np.asarray(self.treatment, dtype=float).ravel()
        x = np.asarray(self.covariates, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        if x.shape[0] != t.shape[0]:
            raise DimensionMismatch(
                f"covariates have {x.shape[0]} rows but treatment has {t.shape[0]}"
            )
        if not np.all((t == 0) | (t == 1)):
            raise ValueError("treatment entries must be exactly 0 or 1")
        if not np.all(np.isfinite(x)):
            raise NonFinite("covariate matrix contains non-finite entries")
        names = tuple(self.covariate_names)
        if len(names) != x.shape[1]:
            raise DimensionMismatch("one name per covariate column is required")
        if len(set(names)) != len(names):
            raise ValueError("covariate names must be unique")
        object.__setattr__(self, "treatment", _frozen(t))
        object.__setattr__(self, "covariates", _frozen(x))
        object.__setattr__(self, "covariate_names", names)
        if self.outcome is not None:
            y = np.asarray(self.outcome, dtype=float).ravel()
            if y.shape[0] != t.shape[0]:
                raise DimensionMismatch("outcome length differs from treatment length")
            object.__setattr__(self, "outcome", _frozen(y))

    @property
    def n(self) -> int:
        return int(self.treatment.shape[0])

    def column(self, name: str) -> np.ndarray:
        return self.covariates[:, self.covariate_names.index(name)]

    def require_both_arms(self) -> None:
        require_both_arms(self.treatment)


def require_both_arms(treatment: np.ndarray) -> None:
    t = np.asarray(treatment)
    if not (np.any(t == 1) and np.any(t == 0)):
        raise DegenerateTreatment("both treatment arms must be present")


def read_csv(
    path,
    treatment: str,
    outcome: Optional[str] = None,
    covariates: Optional[Sequence[str]] = None,
) -> Dataset:
    """Load a dataset from a headed CSV file.

    Every column other than the treatment and outcome columns is treated as a
    numeric covariate unless ``covariates`` lists the ones to keep.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ValueError(f"{path}: empty file") from None
        rows = [r for r in reader if r and any(c.strip() for c in r)]
    if treatment not in header:
        raise KeyError(f"treatment column '{treatment}' not found")
    if outcome is not None and outcome not in header:
        raise KeyError(f"outcome column '{outcome}' not found")
    if covariates is None:
        covariates = [h for h in header if h not in (treatment, outcome)]
    else:
        missing = [c for c in covariates if c not in header]
        if missing:
            raise KeyError(f"covariate column '{missing[0]}' not found")
    idx = {h: i for i, h in enumerate(header)}

    def col(name):
        j = idx[name]
        try:
            return np.array([float(r[j]) for r in rows])
        except (ValueError, IndexError) as exc:
            raise ValueError(f"column '{name}': {exc}") from None

    x = np.column_stack([col(c) for c in covariates]) if covariates else np.empty((len(rows), 0))
    return Dataset(
        treatment=col(treatment),
        covariates=x,
        covariate_names=tuple(covariates),
        outcome=col(outcome) if outcome is not None else None,
    )


@dataclass(frozen=True)
class Transform:
    """A user-supplied column: ``func`` maps the raw covariate matrix to one column."""

    name: str
    func: Callable[[np.ndarray, tuple], np.ndarray] = field(compare=False)


Term = Union[str, tuple, Transform]


@dataclass(frozen=True)
class DesignSpec:
    """Which columns enter f(X) and how they are post-processed.

    ``terms`` holds column names (main effects), 2-tuples of names (pairwise
    products) and :class:`Transform` objects. ``None`` means all main effects.
    """

    terms: Optional[tuple] = None
    standardize: bool = True
    min_nonzero_count: int = 0

    def __post_init__(self):
        if self.min_nonzero_count < 0:
            raise ValueError("min_nonzero_count must be >= 0")
        if self.terms is not None:
            terms = tuple(tuple(t) if isinstance(t, list) else t for t in self.terms)
            keys = [_term_key(t) for t in terms]
            if len(set(keys)) != len(keys):
                raise ValueError("duplicate terms in design spec")
            object.__setattr__(self, "terms", terms)

    @classmethod
    def full(cls, names: Sequence[str], interactions: bool = True, **kw) -> "DesignSpec":
        """All main effects, plus all two-way products when ``interactions``."""
        terms: list = list(names)
        if interactions:
            terms += list(itertools.combinations(names, 2))
        return cls(terms=tuple(terms), **kw)


def _term_key(term: Term):
    if isinstance(term, str):
        return ("main", term)
    if isinstance(term, Transform):
        return ("fn", term.name)
    if isinstance(term, tuple) and len(term) == 2:
        return ("pair", frozenset(term)) if term[0] != term[1] else ("pair", term)
    raise ValueError(f"unrecognized design term {term!r}")


def _term_name(term: Term) -> str:
    if isinstance(term, str):
        return term
    if isinstance(term, Transform):
        return term.name
    return f"{term[0]}:{term[1]}"


@dataclass(frozen=True)
class DesignMatrix:
    """Regressor matrix f(X) whose column 0 is the constant 1.

    ``center`` and ``scale`` hold the statistics used for standardization
    (zeros and ones when no standardization was applied), so
    ``values[:, 1:] * scale + center`` recovers the raw expanded columns.
    """

    values: np.ndarray
    column_names: tuple[str, ...]
    center: np.ndarray
    scale: np.ndarray
    standardized: bool = False
    dropped: tuple[str, ...] = ()

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 2 or v.shape[1] < 1:
            raise DimensionMismatch("design values must be an n x (1+p) matrix")
        if not np.all(v[:, 0] == 1.0):
            raise ValueError("column 0 of a design must be identically 1")
        if not np.all(np.isfinite(v)):
            raise NonFinite("design contains non-finite entries")
        p = v.shape[1] - 1
        if len(self.column_names) != p + 1:
            raise DimensionMismatch("one name per design column is required")
        if np.shape(self.center) != (p,) or np.shape(self.scale) != (p,):
            raise DimensionMismatch("center/scale must have one entry per non-intercept column")
        object.__setattr__(self, "values", _frozen(v))
        object.__setattr__(self, "center", _frozen(self.center))
        object.__setattr__(self, "scale", _frozen(self.scale))
        object.__setattr__(self, "column_names", tuple(self.column_names))

    @classmethod
    def from_array(cls, x: np.ndarray, names: Optional[Sequence[str]] = None) -> "DesignMatrix":
        """Wrap raw regressors (without intercept) as an unstandardized design."""
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        n, p = x.shape
        if names is None:
            names = [f"f{j + 1}" for j in range(p)]
        return cls(
            values=np.column_stack([np.ones(n), x]),
            column_names=("(Intercept)", *names),
            center=np.zeros(p),
            scale=np.ones(p),
        )

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def p(self) -> int:
        """Number of non-intercept columns."""
        return self.values.shape[1] - 1

    def raw(self) -> np.ndarray:
        """Expanded columns on their original (unstandardized) scale."""
        return self.values[:, 1:] * self.scale + self.center

    def subset(self, rows) -> "DesignMatrix":
        """Rows of the design, keeping the full-sample standardization."""
        return DesignMatrix(
            values=self.values[rows],
            column_names=self.column_names,
            center=self.center,
            scale=self.scale,
            standardized=self.standardized,
            dropped=self.dropped,
        )


def build_design(dataset: Dataset, spec: DesignSpec = DesignSpec()) -> DesignMatrix:
    """Expand, filter and standardize covariates into f(X).

    Products are formed on raw columns. A candidate column is dropped when it
    has fewer than ``min_nonzero_count`` nonzero entries, or (when
    standardizing) when it has zero sample variance. A spec with no terms at
    all gives the intercept-only design.
    """
    names = dataset.covariate_names
    terms = spec.terms if spec.terms is not None else names
    x = dataset.covariates
    cols, col_names = [], []
    for term in terms:
        if isinstance(term, str):
            if term not in names:
                raise KeyError(f"unknown covariate '{term}'")
            c = x[:, names.index(term)]
        elif isinstance(term, Transform):
            c = np.asarray(term.func(x, names), dtype=float).ravel()
            if c.shape[0] != dataset.n:
                raise DimensionMismatch(f"transform '{term.name}' returned wrong length")
        else:
            a, b = term
            for nm in (a, b):
                if nm not in names:
                    raise KeyError(f"unknown covariate '{nm}'")
            c = x[:, names.index(a)] * x[:, names.index(b)]
        if not np.all(np.isfinite(c)):
            raise NonFinite(f"term '{_term_name(term)}' produced non-finite values")
        cols.append(c)
        col_names.append(_term_name(term))

    keep, dropped = [], []
    for c, nm in zip(cols, col_names):
        if np.count_nonzero(c) < spec.min_nonzero_count:
            dropped.append(nm)
        elif spec.standardize and (dataset.n < 2 or np.ptp(c) == 0.0):
            dropped.append(nm)
        else:
            keep.append((c, nm))
    if cols and not keep:
        raise EmptyDesign("no non-intercept column survived filtering")

    raw = np.column_stack([c for c, _ in keep]) if keep else np.empty((dataset.n, 0))
    p = raw.shape[1]
    if spec.standardize:
        center = raw.mean(axis=0)
        scale = raw.std(axis=0, ddof=1)
        values = (raw - center) / scale
    else:
        center, scale, values = np.zeros(p), np.ones(p), raw
    return DesignMatrix(
        values=np.column_stack([np.ones(dataset.n), values]),
        column_names=("(Intercept)", *[nm for _, nm in keep]),
        center=center,
        scale=scale,
        standardized=spec.standardize,
        dropped=tuple(dropped),
    )


@dataclass(frozen=True)
class Coefficients:
    """Coefficient vector (intercept first) with its penalty mask."""

    gamma: np.ndarray
    penalty_mask: np.ndarray = None

    def __post_init__(self):
        g = np.asarray(self.gamma, dtype=float).ravel()
        if self.penalty_mask is None:
            mask = np.ones(g.shape[0], dtype=bool)
            mask[0] = False
        else:
            mask = np.asarray(self.penalty_mask, dtype=bool).ravel().copy()
        if mask.shape != g.shape:
            raise DimensionMismatch("penalty mask length differs from gamma")
        if mask[0]:
            raise ValueError("the intercept is never penalized")
        if not np.isfinite(np.abs(g[mask]).sum()):
            raise NonFinite("penalized coefficients must be finite")
        mask.setflags(write=False)
        object.__setattr__(self, "gamma", _frozen(g))
        object.__setattr__(self, "penalty_mask", mask)

    @classmethod
    def zeros(cls, size: int) -> "Coefficients":
        return cls(np.zeros(size))

    @property
    def intercept(self) -> float:
        return float(self.gamma[0])

    @property
    def slopes(self) -> np.ndarray:
        return self.gamma[1:]

    def l1_penalty(self) -> float:
        return float(np.abs(self.gamma[self.penalty_mask]).sum())

    def nonzero_count(self) -> int:
        """Nonzero penalized coefficients."""
        return int(np.count_nonzero(self.gamma[self.penalty_mask]))


def _matrix(design) -> np.ndarray:
    return design.values if isinstance(design, DesignMatrix) else np.asarray(design, dtype=float)


def linear_predictor(design, coef) -> np.ndarray:
    """g_i = gamma' f(X_i), with no clamping."""
    f = _matrix(design)
    gamma = coef.gamma if isinstance(coef, Coefficients) else np.asarray(coef, dtype=float)
    if f.shape[1] != gamma.shape[0]:
        raise DimensionMismatch(
            f"design has {f.shape[1]} columns but coefficient vector has {gamma.shape[0]}"
        )
    return f @ gamma


def propensity(g) -> np.ndarray:
    """Logistic link 1 / (1 + exp(-g)), evaluated without overflow."""
    return expit(np.asarray(g, dtype=float))


def logit(p) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    return np.log(p) - np.log1p(-p)
