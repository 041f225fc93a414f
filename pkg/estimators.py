"""
Design-based estimators of a population mean under simple random sampling.

HTE is the sample mean with the n-1 sample variance over n. SRE adjusts the
sample mean by slope * (population covariate mean - sample covariate mean)
using an OLS working model, with two variance estimators: the residual
("naive") variance and the g-weighted residual variance.

The *_batch functions evaluate the formulas along the last axis of a
(replicates, n) array; the single-sample functions wrap them.
"""

import math
from dataclasses import dataclass
from enum import Enum
from typing import Optional

import numpy as np
from scipy.special import betainc, betaincinv

from errors import (
    ArgumentError,
    DegenerateCovariateError,
    EstimatorConsistencyError,
    InsufficientSampleError,
)

# Relative tolerance between the slope-adjusted mean and prediction + mean residual
DECOMPOSITION_RTOL = 1e-9


class Method(str, Enum):
    HTE = "HTE"
    SRE = "SRE"


class VarianceMethod(str, Enum):
    NAIVE = "naive"
    GWEIGHT = "gweight"


@dataclass(frozen=True)
class Estimate:
    """
    A point estimate with its sampling-variance estimate.

    For SRE, model_prediction (a + b * xbar_pop) plus bias_correction (mean
    residual) reproduces point.
    """
    method: Method
    point: float
    variance: float
    variance_method: VarianceMethod
    n: int
    df: int
    model_prediction: Optional[float] = None
    bias_correction: Optional[float] = None

    @property
    def standard_error(self) -> float:
        return math.sqrt(self.variance)


@dataclass(frozen=True)
class RegressionFit:
    intercept_a: float
    slope_b: float
    residuals: np.ndarray
    xbar_sample: float
    zbar_sample: float


@dataclass(frozen=True)
class ConfidenceInterval:
    lower: float
    upper: float
    alpha: float

    @property
    def center(self) -> float:
        return 0.5 * (self.lower + self.upper)

    @property
    def half_width(self) -> float:
        return 0.5 * (self.upper - self.lower)

    def contains(self, value: float) -> bool:
        return self.lower <= value <= self.upper


@dataclass(frozen=True)
class RegressionBatch:
    """OLS fits of one (replicates, n) block; every field has one entry per row."""
    intercept: np.ndarray
    slope: np.ndarray
    residuals: np.ndarray
    xbar_sample: np.ndarray
    zbar_sample: np.ndarray
    x_centered: np.ndarray
    sxx: np.ndarray


@dataclass(frozen=True)
class RegressionEstimates:
    point: np.ndarray
    model_prediction: np.ndarray
    bias_correction: np.ndarray
    variance_naive: np.ndarray
    variance_gweight: np.ndarray
    fit: RegressionBatch


# =============================================================================
# BATCH FORMULAS
# =============================================================================

def _as_batch(values, name: str) -> np.ndarray:
    array = np.asarray(values, dtype=float)
    if array.ndim == 1:
        array = array[np.newaxis, :]
    if array.ndim != 2:
        raise ArgumentError(f"{name} must be a 1-D sample or a 2-D (replicates, n) block")
    return array


def hte_batch(z) -> tuple:
    """Sample means and S^2(z)/n for every row."""
    z = _as_batch(z, "z")
    n = z.shape[-1]
    if n < 2:
        raise InsufficientSampleError(f"HTE variance needs n >= 2, got n={n}")
    return z.mean(axis=-1), z.var(axis=-1, ddof=1) / n


def ols_fit_batch(x, z) -> RegressionBatch:
    x = _as_batch(x, "x")
    z = _as_batch(z, "z")
    if x.shape != z.shape:
        raise ArgumentError(f"x and z shapes differ: {x.shape} vs {z.shape}")
    n = x.shape[-1]
    if n < 3:
        raise InsufficientSampleError(f"regression estimator needs n >= 3, got n={n}")

    xbar = x.mean(axis=-1)
    zbar = z.mean(axis=-1)
    x_centered = x - xbar[:, np.newaxis]
    sxx = np.sum(x_centered * x_centered, axis=-1)

    # constant x leaves only rounding noise in sxx
    scale = n * np.finfo(float).eps * np.max(np.abs(x), axis=-1)
    if np.any(sxx <= scale * scale):
        raise DegenerateCovariateError("covariate is constant over the sample; the OLS slope is undefined")

    slope = np.sum(x_centered * (z - zbar[:, np.newaxis]), axis=-1) / sxx
    intercept = zbar - slope * xbar
    residuals = z - (intercept[:, np.newaxis] + slope[:, np.newaxis] * x)
    return RegressionBatch(
        intercept=intercept,
        slope=slope,
        residuals=residuals,
        xbar_sample=xbar,
        zbar_sample=zbar,
        x_centered=x_centered,
        sxx=sxx,
    )


def _naive_variance(residuals: np.ndarray) -> np.ndarray:
    n = residuals.shape[-1]
    if n < 3:
        raise InsufficientSampleError(f"residual variance needs n >= 3, got n={n}")
    return np.sum(residuals * residuals, axis=-1) / (n - 2) / n


def _gweight_variance(fit: RegressionBatch, xbar_pop) -> np.ndarray:
    n = fit.residuals.shape[-1]
    s2x = fit.sxx / n
    shift = (np.asarray(xbar_pop, dtype=float) - fit.xbar_sample) / s2x
    g = 1.0 + shift[:, np.newaxis] * fit.x_centered
    weighted = g * fit.residuals
    weighted = weighted - weighted.mean(axis=-1)[:, np.newaxis]
    return np.sum(weighted * weighted, axis=-1) / (n * (n - 1))


def sre_batch(x, z, xbar_pop: float) -> RegressionEstimates:
    """
    Regression estimates for every row, with both variance estimators.

    Raises:
        EstimatorConsistencyError: zbar + b (xbar_pop - xbar) and
            a + b xbar_pop + mean(e) disagree beyond rounding
    """
    fit = ols_fit_batch(x, z)
    point = fit.zbar_sample + fit.slope * (xbar_pop - fit.xbar_sample)
    model_prediction = fit.intercept + fit.slope * xbar_pop
    bias_correction = fit.residuals.mean(axis=-1)

    recombined = model_prediction + bias_correction
    scale = np.maximum.reduce([
        np.ones_like(point),
        np.max(np.abs(_as_batch(z, "z")), axis=-1),
        np.abs(fit.intercept),
        np.abs(fit.slope * xbar_pop),
    ])
    if not np.all(np.abs(point - recombined) <= DECOMPOSITION_RTOL * scale):
        worst = float(np.max(np.abs(point - recombined)))
        raise EstimatorConsistencyError(
            f"regression estimate and model prediction + bias correction differ by {worst:.3e}"
        )

    return RegressionEstimates(
        point=point,
        model_prediction=model_prediction,
        bias_correction=bias_correction,
        variance_naive=_naive_variance(fit.residuals),
        variance_gweight=_gweight_variance(fit, xbar_pop),
        fit=fit,
    )


def confidence_bounds(point, variance, df, alpha: float = 0.05) -> tuple:
    """Vectorized point -/+ t_{1-alpha/2, df} * sqrt(variance)."""
    _check_alpha(alpha)
    variance = np.asarray(variance, dtype=float)
    if np.any(variance < 0):
        raise ArgumentError("variance must be non-negative")
    half_width = t_quantile(1.0 - alpha / 2.0, df) * np.sqrt(variance)
    point = np.asarray(point, dtype=float)
    return point - half_width, point + half_width


# =============================================================================
# SINGLE-SAMPLE OPERATIONS
# =============================================================================

def hte(z) -> Estimate:
    z = np.asarray(z, dtype=float).ravel()
    point, variance = hte_batch(z)
    return Estimate(
        method=Method.HTE,
        point=float(point[0]),
        variance=float(variance[0]),
        variance_method=VarianceMethod.NAIVE,
        n=z.size,
        df=z.size - 1,
    )


def ols_fit(x, z) -> RegressionFit:
    fit = ols_fit_batch(np.ravel(x), np.ravel(z))
    return RegressionFit(
        intercept_a=float(fit.intercept[0]),
        slope_b=float(fit.slope[0]),
        residuals=fit.residuals[0],
        xbar_sample=float(fit.xbar_sample[0]),
        zbar_sample=float(fit.zbar_sample[0]),
    )


def sre(x, z, xbar_pop: float, variance_method: VarianceMethod = VarianceMethod.GWEIGHT) -> Estimate:
    """Regression estimate of the population mean of z given the population mean of x."""
    variance_method = VarianceMethod(variance_method)
    x = np.asarray(x, dtype=float).ravel()
    result = sre_batch(x, np.ravel(z), xbar_pop)
    if variance_method is VarianceMethod.GWEIGHT:
        variance = result.variance_gweight
    else:
        variance = result.variance_naive
    return Estimate(
        method=Method.SRE,
        point=float(result.point[0]),
        variance=float(variance[0]),
        variance_method=variance_method,
        n=x.size,
        df=x.size - 2,
        model_prediction=float(result.model_prediction[0]),
        bias_correction=float(result.bias_correction[0]),
    )


def sre_variance_naive(fit: RegressionFit, n: int) -> float:
    """Residual variance (divisor n-2) over n."""
    residuals = np.asarray(fit.residuals, dtype=float)
    if residuals.size != n:
        raise ArgumentError(f"fit has {residuals.size} residuals, expected n={n}")
    return float(_naive_variance(residuals[np.newaxis, :])[0])


def sre_variance_gweight(x, fit: RegressionFit, xbar_pop: float) -> float:
    """
    g-weighted residual variance, 1/(n(n-1)) * sum((g_k e_k - mean(g e))^2)
    with g_k = 1 + (xbar_pop - xbar_S)(x_k - xbar_S) / s2x and s2x using divisor n.
    """
    x = np.asarray(x, dtype=float).ravel()
    residuals = np.asarray(fit.residuals, dtype=float)
    if x.size != residuals.size:
        raise ArgumentError("x and residuals differ in length")
    if x.size < 3:
        raise InsufficientSampleError(f"g-weight variance needs n >= 3, got n={x.size}")
    x_centered = x - fit.xbar_sample
    sxx = float(np.sum(x_centered * x_centered))
    if sxx == 0.0:
        raise DegenerateCovariateError("covariate is constant over the sample")
    batch = RegressionBatch(
        intercept=np.array([fit.intercept_a]),
        slope=np.array([fit.slope_b]),
        residuals=residuals[np.newaxis, :],
        xbar_sample=np.array([fit.xbar_sample]),
        zbar_sample=np.array([fit.zbar_sample]),
        x_centered=x_centered[np.newaxis, :],
        sxx=np.array([sxx]),
    )
    return float(_gweight_variance(batch, xbar_pop)[0])


def confidence_interval(point: float, variance: float, df: int, alpha: float = 0.05) -> ConfidenceInterval:
    if variance < 0:
        raise ArgumentError(f"variance must be non-negative, got {variance}")
    lower, upper = confidence_bounds(point, variance, df, alpha)
    return ConfidenceInterval(lower=float(lower), upper=float(upper), alpha=alpha)


# =============================================================================
# STUDENT'S t
# =============================================================================

def _check_alpha(alpha: float):
    if not 0.0 < alpha < 1.0:
        raise ArgumentError(f"alpha must lie in (0, 1), got {alpha}")


def _check_df(df):
    if not df >= 1:
        raise ArgumentError(f"degrees of freedom must be >= 1, got {df}")


def t_quantile(p: float, df) -> float:
    """
    Inverse CDF of Student's t with df degrees of freedom.

    Uses the identity P(|T| > t) = I_{df/(df+t^2)}(df/2, 1/2) and inverts the
    regularized incomplete beta function.
    """
    if not 0.0 < p < 1.0:
        raise ArgumentError(f"p must lie in (0, 1), got {p}")
    _check_df(df)
    if p == 0.5:
        return 0.0

    tail = min(p, 1.0 - p)
    x = betaincinv(df / 2.0, 0.5, 2.0 * tail)
    t = math.sqrt(df * (1.0 - x) / x)
    return t if p > 0.5 else -t


def t_two_sided_p_value(t: float, df) -> float:
    """P(|T| >= |t|) for Student's t with df degrees of freedom."""
    _check_df(df)
    if math.isnan(t):
        raise ArgumentError("t statistic is NaN")
    if math.isinf(t):
        return 0.0
    return float(betainc(df / 2.0, 0.5, df / (df + t * t)))
