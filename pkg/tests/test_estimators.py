"""
Tests for HTE, the OLS working model, SRE and its variance estimators,
confidence intervals and Student's t.

Includes exact design-bias checks by enumerating every sample of a 12-cell
population.
"""

import itertools
import math

import numpy as np
import pytest
from scipy import stats

import estimators
from errors import (
    ArgumentError,
    DegenerateCovariateError,
    EstimatorConsistencyError,
    InsufficientSampleError,
)
from estimators import (
    Method,
    VarianceMethod,
    confidence_interval,
    hte,
    ols_fit,
    sre,
    sre_batch,
    sre_variance_gweight,
    sre_variance_naive,
    t_quantile,
    t_two_sided_p_value,
)


# Independent reimplementation with plain Python loops and exact summation
def _brute_mean(values):
    return math.fsum(values) / len(values)


def _brute_hte(z):
    n = len(z)
    zbar = _brute_mean(z)
    s2 = math.fsum((v - zbar) ** 2 for v in z) / (n - 1)
    return zbar, s2 / n


def _brute_sre(x, z, xbar_pop):
    n = len(x)
    xbar, zbar = _brute_mean(x), _brute_mean(z)
    sxx = math.fsum((v - xbar) ** 2 for v in x)
    b = math.fsum((xi - xbar) * (zi - zbar) for xi, zi in zip(x, z)) / sxx
    a = zbar - b * xbar
    e = [zi - (a + b * xi) for xi, zi in zip(x, z)]
    point = zbar + b * (xbar_pop - xbar)
    naive = math.fsum(v * v for v in e) / (n - 2) / n
    s2x = sxx / n
    ge = [(1 + (xbar_pop - xbar) * (xi - xbar) / s2x) * ei for xi, ei in zip(x, e)]
    ge_bar = _brute_mean(ge)
    gweight = math.fsum((v - ge_bar) ** 2 for v in ge) / (n * (n - 1))
    return point, naive, gweight


class TestHte:
    """Sample mean and its variance."""

    def test_three_values(self):
        est = hte([1.0, 2.0, 3.0])
        assert est.method is Method.HTE
        assert est.point == pytest.approx(2.0)
        assert est.variance == pytest.approx(1.0 / 3.0)
        assert est.df == 2
        assert est.n == 3

    def test_constant(self):
        est = hte([5.0, 5.0, 5.0, 5.0])
        assert est.point == 5.0
        assert est.variance == 0.0

    def test_two_values(self):
        est = hte([0.0, 10.0])
        assert est.point == 5.0
        assert est.variance == pytest.approx(25.0)

    def test_single_value_rejected(self):
        with pytest.raises(InsufficientSampleError):
            hte([1.0])


class TestOlsFit:
    """Working-model fit."""

    def test_perfect_line(self):
        fit = ols_fit([0.0, 1.0, 2.0], [1.0, 3.0, 5.0])
        assert fit.intercept_a == pytest.approx(1.0)
        assert fit.slope_b == pytest.approx(2.0)
        np.testing.assert_allclose(fit.residuals, 0.0, atol=1e-12)

    def test_hand_computed(self):
        fit = ols_fit([0.0, 1.0, 2.0, 3.0], [1.0, 2.0, 2.0, 3.0])
        assert fit.slope_b == pytest.approx(0.6)
        assert fit.intercept_a == pytest.approx(1.1)
        assert fit.xbar_sample == 1.5
        assert fit.zbar_sample == 2.0

    def test_residual_properties(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=40)
        z = 3.0 * x + rng.normal(size=40) + 10.0
        fit = ols_fit(x, z)
        assert abs(fit.residuals.sum()) < 1e-10
        assert abs(np.dot(fit.residuals, x)) < 1e-10

    def test_constant_covariate(self):
        with pytest.raises(DegenerateCovariateError):
            ols_fit([1.0, 1.0, 1.0], [1.0, 2.0, 3.0])

    def test_too_few_points(self):
        with pytest.raises(InsufficientSampleError):
            ols_fit([1.0, 2.0], [1.0, 2.0])


class TestSre:
    """Regression estimator point values and decomposition."""

    def test_equal_means_gives_hte(self):
        x = [0.0, 1.0, 2.0, 3.0]
        z = [1.0, 2.0, 2.0, 3.0]
        assert sre(x, z, xbar_pop=1.5).point == hte(z).point

    def test_perfect_model(self):
        est = sre([0.0, 1.0, 2.0], [1.0, 3.0, 5.0], xbar_pop=10.0)
        assert est.point == pytest.approx(21.0)
        assert est.variance == pytest.approx(0.0, abs=1e-20)
        assert est.df == 1

    def test_hand_computed(self):
        est = sre([0.0, 1.0, 2.0, 3.0], [1.0, 2.0, 2.0, 3.0], xbar_pop=2.0)
        assert est.point == pytest.approx(2.3)
        assert est.method is Method.SRE

    def test_decomposition_identity(self):
        rng = np.random.default_rng(9)
        for _ in range(50):
            x = rng.normal(5.0, 2.0, size=12)
            z = 1.5 * x + rng.normal(size=12)
            est = sre(x, z, xbar_pop=4.2)
            assert est.model_prediction + est.bias_correction == pytest.approx(est.point, rel=1e-12)

    def test_affine_covariate_invariance(self):
        rng = np.random.default_rng(10)
        x = rng.normal(size=30)
        z = 2.0 * x + rng.normal(size=30)
        base = sre(x, z, xbar_pop=0.25).point
        c, d = -3.5, 100.0
        shifted = sre(c * x + d, z, xbar_pop=c * 0.25 + d).point
        assert shifted == pytest.approx(base, rel=1e-10, abs=1e-10)

    def test_variance_method_choice(self):
        rng = np.random.default_rng(11)
        x = rng.normal(size=25)
        z = x + rng.normal(size=25)
        fit = ols_fit(x, z)
        naive = sre(x, z, 0.5, VarianceMethod.NAIVE)
        gweight = sre(x, z, 0.5, VarianceMethod.GWEIGHT)
        assert naive.variance == pytest.approx(sre_variance_naive(fit, 25))
        assert gweight.variance == pytest.approx(sre_variance_gweight(x, fit, 0.5))
        assert naive.variance_method is VarianceMethod.NAIVE

    def test_consistency_check_raises(self, monkeypatch):
        monkeypatch.setattr(estimators, "DECOMPOSITION_RTOL", -1.0)
        with pytest.raises(EstimatorConsistencyError):
            sre([0.0, 1.0, 2.0, 3.0], [1.0, 2.0, 2.0, 3.0], xbar_pop=2.0)


class TestSreVariances:
    """Naive (residual) and g-weight variance estimators."""

    def test_naive_zero_residuals(self):
        fit = ols_fit([0.0, 1.0, 2.0], [1.0, 3.0, 5.0])
        assert sre_variance_naive(fit, 3) == pytest.approx(0.0, abs=1e-20)

    def test_naive_hand_computed(self):
        fit = estimators.RegressionFit(0.0, 1.0, np.array([-1.0, 0.0, 1.0]), 1.0, 1.0)
        assert sre_variance_naive(fit, 3) == pytest.approx(2.0 / 3.0)

    def test_naive_too_small(self):
        fit = estimators.RegressionFit(0.0, 1.0, np.array([-1.0, 1.0]), 1.0, 1.0)
        with pytest.raises(InsufficientSampleError):
            sre_variance_naive(fit, 2)

    def test_gweight_zero_residuals(self):
        x = [0.0, 1.0, 2.0]
        fit = ols_fit(x, [1.0, 3.0, 5.0])
        assert sre_variance_gweight(x, fit, xbar_pop=7.0) == pytest.approx(0.0, abs=1e-20)

    def test_gweight_collapses_when_means_match(self):
        x = np.array([0.0, 1.0, 2.0, 3.0, 4.0])
        z = np.array([1.0, 2.5, 2.0, 4.0, 4.5])
        fit = ols_fit(x, z)
        e = fit.residuals
        expected = np.sum((e - e.mean()) ** 2) / (5 * 4)
        assert sre_variance_gweight(x, fit, xbar_pop=2.0) == pytest.approx(expected, rel=1e-12)

    def test_gweight_non_negative(self):
        rng = np.random.default_rng(12)
        x = rng.normal(size=(500, 6))
        z = rng.normal(size=(500, 6))
        result = sre_batch(x, z, xbar_pop=3.0)
        assert np.all(result.variance_gweight >= 0)
        assert np.all(result.variance_naive >= 0)


class TestToyEnumeration:
    """Exact design properties from all C(12, n) samples of x = 1..12, z = x^2."""

    @pytest.mark.parametrize("n", [3, 4, 5])
    def test_hte_design_unbiased(self, toy_population, n):
        means = [hte(toy_population.z[list(c)]).point for c in itertools.combinations(range(12), n)]
        assert abs(math.fsum(means) / len(means) - toy_population.mu) < 1e-12

    def test_sre_bias_shrinks_with_n(self, toy_population):
        pop = toy_population
        biases = []
        for n in (3, 4, 5):
            cells = np.array(list(itertools.combinations(range(12), n)))
            points = sre_batch(pop.x[cells], pop.z[cells], pop.xbar_pop).point
            biases.append(math.fsum(points) / len(points) - pop.mu)
        assert all(b != 0.0 for b in biases)
        assert abs(biases[0]) > abs(biases[1]) > abs(biases[2])

    @pytest.mark.parametrize("n", [3, 4])
    def test_matches_brute_force(self, toy_population, n):
        pop = toy_population
        for combo in itertools.combinations(range(12), n):
            cells = list(combo)
            x, z = pop.x[cells], pop.z[cells]
            point, variance = _brute_hte(z.tolist())
            est = hte(z)
            assert est.point == pytest.approx(point, rel=1e-12, abs=1e-12)
            assert est.variance == pytest.approx(variance, rel=1e-12, abs=1e-12)

            point, naive, gweight = _brute_sre(x.tolist(), z.tolist(), pop.xbar_pop)
            assert sre(x, z, pop.xbar_pop).point == pytest.approx(point, rel=1e-12, abs=1e-12)
            result = sre_batch(x, z, pop.xbar_pop)
            assert result.variance_naive[0] == pytest.approx(naive, rel=1e-12, abs=1e-12)
            assert result.variance_gweight[0] == pytest.approx(gweight, rel=1e-12, abs=1e-12)


class TestConfidenceInterval:
    """Intervals from point, variance and df."""

    def test_zero_variance(self):
        ci = confidence_interval(3.0, 0.0, df=10)
        assert ci.lower == ci.upper == 3.0
        assert ci.contains(3.0)

    def test_large_df_uses_normal_quantile(self):
        ci = confidence_interval(0.0, 4.0, df=1_000_000, alpha=0.05)
        assert ci.half_width / 2.0 == pytest.approx(1.95996, abs=1e-4)

    def test_df_four(self):
        ci = confidence_interval(10.0, 1.0, df=4)
        assert ci.half_width == pytest.approx(2.776, abs=1e-3)
        assert ci.center == pytest.approx(10.0)
        assert ci.alpha == 0.05

    @pytest.mark.parametrize("kwargs", [
        {"alpha": 0.0}, {"alpha": 1.0}, {"df": 0},
    ])
    def test_invalid_arguments(self, kwargs):
        args = {"point": 0.0, "variance": 1.0, "df": 5, "alpha": 0.05}
        args.update(kwargs)
        with pytest.raises(ArgumentError):
            confidence_interval(**args)

    def test_negative_variance(self):
        with pytest.raises(ArgumentError):
            confidence_interval(0.0, -1.0, df=5)


class TestStudentT:
    """Quantiles and p-values of Student's t."""

    @pytest.mark.parametrize("p, df, expected", [
        (0.975, 2, 4.303),
        (0.975, 39, 2.023),
        (0.975, 4, 2.776),
    ])
    def test_table_values(self, p, df, expected):
        assert t_quantile(p, df) == pytest.approx(expected, abs=1e-3)

    def test_median_is_zero(self):
        for df in (1, 3, 100):
            assert t_quantile(0.5, df) == 0.0

    def test_symmetric_and_monotone(self):
        probabilities = [0.01, 0.1, 0.3, 0.6, 0.9, 0.995]
        for df in (1, 5, 30):
            values = [t_quantile(p, df) for p in probabilities]
            assert values == sorted(values)
            for p in probabilities:
                assert t_quantile(p, df) == pytest.approx(-t_quantile(1 - p, df), rel=1e-10)

    def test_matches_scipy(self):
        for p in (0.6, 0.9, 0.975, 0.999):
            for df in (1, 2, 7, 39, 1999):
                assert t_quantile(p, df) == pytest.approx(stats.t.ppf(p, df), rel=1e-9, abs=1e-8)

    @pytest.mark.parametrize("p", [0.0, 1.0, -0.5])
    def test_invalid_probability(self, p):
        with pytest.raises(ArgumentError):
            t_quantile(p, 5)

    def test_p_value(self):
        assert t_two_sided_p_value(0.0, 10) == pytest.approx(1.0)
        assert t_two_sided_p_value(math.inf, 10) == 0.0
        for t in (0.7746, 2.0, -3.1):
            assert t_two_sided_p_value(t, 3) == pytest.approx(2 * stats.t.sf(abs(t), 3), rel=1e-10)
