import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from rcal.data import (
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
from rcal.errors import DegenerateTreatment, DimensionMismatch, EmptyDesign, NonFinite


def make_dataset(x, names=None, t=None):
    x = np.asarray(x, dtype=float)
    n = x.shape[0]
    if t is None:
        t = np.arange(n) % 2
    names = names or [f"x{j + 1}" for j in range(x.shape[1])]
    return Dataset(treatment=t, covariates=x, covariate_names=names)


class TestDataset:
    def test_rejects_non_binary_treatment(self):
        with pytest.raises(ValueError):
            Dataset(treatment=[0, 0.5], covariates=[[1.0], [2.0]], covariate_names=["a"])

    def test_rejects_non_finite_covariates(self):
        with pytest.raises(NonFinite):
            Dataset(treatment=[0, 1], covariates=[[np.nan], [2.0]], covariate_names=["a"])

    def test_rejects_length_mismatch(self):
        with pytest.raises(DimensionMismatch):
            Dataset(treatment=[0, 1, 1], covariates=[[1.0], [2.0]], covariate_names=["a"])

    def test_arrays_are_read_only(self):
        d = make_dataset([[1.0], [2.0]])
        with pytest.raises(ValueError):
            d.covariates[0, 0] = 5.0

    def test_single_arm_rejected_for_fitting(self):
        d = make_dataset([[1.0], [2.0]], t=[1, 1])
        with pytest.raises(DegenerateTreatment):
            d.require_both_arms()


class TestBuildDesign:
    def test_identity_expansion_without_standardization(self):
        x = np.array([[1.0, 2.0], [3.0, 5.0], [4.0, -1.0]])
        dm = build_design(make_dataset(x), DesignSpec(standardize=False))
        assert dm.values.shape == (3, 3)
        np.testing.assert_array_equal(dm.values, np.column_stack([np.ones(3), x]))
        assert dm.column_names == ("(Intercept)", "x1", "x2")

    def test_constant_column_dropped_when_standardizing(self):
        x = np.array([[5.0, 1.0], [5.0, 2.0], [5.0, 4.0]])
        dm = build_design(make_dataset(x), DesignSpec(standardize=True))
        assert dm.dropped == ("x1",)
        assert dm.column_names == ("(Intercept)", "x2")

    def test_only_constant_column_is_empty_design(self):
        x = np.full((4, 1), 5.0)
        with pytest.raises(EmptyDesign):
            build_design(make_dataset(x), DesignSpec(standardize=True))

    def test_zero_interaction_dropped_by_nonzero_filter(self):
        x = np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]])
        spec = DesignSpec.full(["x1", "x2"], interactions=True, standardize=False, min_nonzero_count=1)
        dm = build_design(make_dataset(x), spec)
        assert dm.p == 2
        assert dm.dropped == ("x1:x2",)

    def test_interaction_is_product_of_raw_columns(self, rng):
        x = rng.standard_normal((30, 3)) * [1.0, 3.0, 0.5] + [2.0, -1.0, 0.0]
        spec = DesignSpec.full(["x1", "x2", "x3"], interactions=True, standardize=True)
        dm = build_design(make_dataset(x), spec)
        raw = dm.raw()
        k = dm.column_names.index("x1:x3") - 1
        np.testing.assert_allclose(raw[:, k], x[:, 0] * x[:, 2], rtol=1e-12, atol=1e-12)
        plain = build_design(make_dataset(x), DesignSpec(terms=spec.terms, standardize=False))
        np.testing.assert_array_equal(plain.values[:, k + 1], x[:, 0] * x[:, 2])

    def test_standardized_columns_have_mean_zero_and_unit_variance(self, rng):
        x = rng.standard_normal((50, 4)) * 7.0 + 3.0
        dm = build_design(make_dataset(x), DesignSpec())
        np.testing.assert_allclose(dm.values[:, 1:].mean(axis=0), 0.0, atol=1e-10)
        np.testing.assert_allclose(dm.values[:, 1:].var(axis=0, ddof=1), 1.0, atol=1e-10)
        np.testing.assert_array_equal(dm.values[:, 0], 1.0)

    def test_duplicate_terms_rejected(self):
        with pytest.raises(ValueError):
            DesignSpec(terms=("a", ("a", "b"), ("b", "a")))

    def test_negative_nonzero_threshold_rejected(self):
        with pytest.raises(ValueError):
            DesignSpec(min_nonzero_count=-1)

    def test_transform_producing_nan_raises(self):
        x = np.array([[1.0], [-1.0], [2.0]])
        spec = DesignSpec(terms=(Transform("log", lambda x, names: np.log(x[:, 0])),))
        with pytest.raises(NonFinite):
            with np.errstate(invalid="ignore"):
                build_design(make_dataset(x), spec)

    def test_no_terms_gives_intercept_only(self):
        dm = build_design(make_dataset(np.empty((3, 0)), names=[]), DesignSpec())
        assert dm.values.shape == (3, 1)

    def test_subset_keeps_metadata(self, rng):
        dm = build_design(make_dataset(rng.standard_normal((10, 2))), DesignSpec())
        sub = dm.subset(np.arange(4))
        assert sub.n == 4 and sub.column_names == dm.column_names

    @given(arrays(np.float64, (12, 3), elements=st.floats(-1e3, 1e3)))
    def test_unstandardizing_recovers_raw_columns(self, x):
        if np.any(np.ptp(x, axis=0) < 1e-3):
            return
        dm = build_design(make_dataset(x), DesignSpec())
        back = dm.values[:, 1:] * dm.scale + dm.center
        np.testing.assert_allclose(back, x, rtol=1e-12, atol=1e-12 * np.abs(x).max())


class TestLinearPredictor:
    def test_zero_coefficients(self):
        f = np.column_stack([np.ones(3), [1.0, 2.0, 3.0]])
        np.testing.assert_array_equal(linear_predictor(f, Coefficients.zeros(2)), 0.0)

    def test_hand_dot_product(self):
        f = np.array([[1.0, 2.0]])
        assert linear_predictor(f, Coefficients(np.array([0.5, -1.0])))[0] == -1.5

    def test_intercept_only_coefficients(self):
        f = np.column_stack([np.ones(4), np.arange(4.0)])
        np.testing.assert_array_equal(linear_predictor(f, np.array([1.0, 0.0])), 1.0)

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionMismatch):
            linear_predictor(np.ones((3, 2)), np.zeros(3))

    def test_intercept_is_never_penalized(self):
        with pytest.raises(ValueError):
            Coefficients(np.array([3.0, 1.0, -2.0]), penalty_mask=np.array([True, True, True]))
        c = Coefficients(np.array([3.0, 1.0, -2.0]))
        assert not c.penalty_mask[0]
        assert c.l1_penalty() == 3.0
        assert c.nonzero_count() == 2


class TestPropensity:
    def test_known_values(self):
        assert propensity(0.0) == 0.5
        assert propensity(math.log(3)) == pytest.approx(0.75, abs=1e-15)
        assert propensity(-math.log(3)) == pytest.approx(0.25, abs=1e-15)

    @given(st.floats(-30, 30))
    def test_symmetry(self, g):
        assert abs(propensity(-g) - (1 - propensity(g))) <= 1e-15

    def test_strictly_increasing_and_inside_unit_interval(self):
        g = np.linspace(-30, 30, 6001)
        p = propensity(g)
        assert np.all(np.diff(p) > 0)
        assert np.all((p > 0) & (p < 1))

    def test_saturates_monotonically_beyond_float_resolution(self):
        g = np.linspace(-700, 700, 100001)
        p = propensity(g)
        assert np.all(np.isfinite(p))
        assert np.all(np.diff(p) >= 0)
        assert np.all(p > 0)


class TestCsv:
    def test_round_trip(self, tmp_path):
        path = tmp_path / "d.csv"
        path.write_text("t,y,a,b\n1,2.5,0.1,3\n0,1.0,-0.2,4\n", encoding="utf-8")
        d = read_csv(path, "t", "y")
        assert d.covariate_names == ("a", "b")
        np.testing.assert_array_equal(d.outcome, [2.5, 1.0])
        np.testing.assert_array_equal(d.covariates, [[0.1, 3.0], [-0.2, 4.0]])

    def test_missing_column_named(self, tmp_path):
        path = tmp_path / "d.csv"
        path.write_text("t,a\n1,0\n0,1\n", encoding="utf-8")
        with pytest.raises(KeyError, match="trt"):
            read_csv(path, "trt")

    def test_from_array_wraps_raw_regressors(self):
        dm = DesignMatrix.from_array(np.array([1.0, 2.0, 3.0]))
        assert dm.p == 1 and not dm.standardized
