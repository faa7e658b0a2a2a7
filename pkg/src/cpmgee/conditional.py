"""Conditional CDFs, exceedance probabilities, means and quantiles.

All quantities are functionals of the fitted step CDF
``F(y_(j) | x) = F_eps(gamma_j - beta'x)``; standard errors use the delta
method with the fit's robust covariance.
"""

from __future__ import annotations

import enum
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np
from scipy import special

from .errors import DimensionError, DomainError, ExtremeQuantileError
from .linkfun import link_inverse, link_inverse_deriv
from .npmle import FitResult


class EstimateKind(str, enum.Enum):
    CDF = "cdf"
    EXCEEDANCE = "exceedance"
    MEAN = "mean"
    QUANTILE = "quantile"


@dataclass(frozen=True)
class ConditionalEstimate:
    """A derived scalar with its uncertainty.

    ``argument`` is the response value (cdf, exceedance) or probability
    (quantile) the estimate refers to; ``se`` is ``None`` for quantiles,
    which only carry an interval.
    """

    kind: EstimateKind
    value: float
    se: Optional[float]
    ci_low: float
    ci_high: float
    level: float
    argument: Optional[float] = None

    def to_dict(self) -> dict:
        out = asdict(self)
        out["kind"] = self.kind.value
        return out


def _z(level: float) -> float:
    if not 0.0 < level < 1.0:
        raise DomainError(f"confidence level must be in (0, 1), got {level!r}")
    return float(special.ndtri(0.5 + 0.5 * level))


def _check_x(fit: FitResult, x) -> np.ndarray:
    x = np.atleast_1d(np.asarray(x, dtype=float)).reshape(-1)
    p = fit.theta.beta.shape[0]
    if x.shape[0] != p:
        raise DimensionError(f"covariate vector has length {x.shape[0]}, the fit has {p}")
    return x


def _eta_se(fit: FitResult, x: np.ndarray, idx=None) -> np.ndarray:
    """Standard error of ``gamma_j - beta'x`` for intercepts ``idx`` (all by default)."""
    m = fit.theta.n_gamma
    V = fit.robust_cov
    idx = np.arange(m) if idx is None else np.asarray(idx)
    Vgb = V[idx, m:]
    var = V[idx, idx] - 2.0 * (Vgb @ x) + x @ V[m:, m:] @ x
    return np.sqrt(np.clip(var, 0.0, None))


def cdf_band(fit: FitResult, x, level: float = 0.95):
    """Fitted CDF at every level ``y_(1..J-1)`` with pointwise confidence bands.

    Returns ``(F, lower, upper)``, each of length ``J - 1``.
    """
    x = _check_x(fit, x)
    z = _z(level)
    eta = fit.theta.gamma - fit.theta.beta @ x
    s = _eta_se(fit, x)
    return (link_inverse(fit.link, eta), link_inverse(fit.link, eta - z * s),
            link_inverse(fit.link, eta + z * s))


def conditional_cdf(fit: FitResult, x, y: float, level: float = 0.95) -> ConditionalEstimate:
    """``F(y | x)`` using the largest level not exceeding ``y``.

    Below the smallest level the estimate is exactly 0, at or above the
    largest exactly 1, both with a degenerate interval.
    """
    x = _check_x(fit, x)
    z = _z(level)
    levels = fit.levels
    j = int(np.searchsorted(levels, float(y), side="right"))
    if j == 0:
        return ConditionalEstimate(EstimateKind.CDF, 0.0, 0.0, 0.0, 0.0, level, float(y))
    if j == levels.shape[0]:
        return ConditionalEstimate(EstimateKind.CDF, 1.0, 0.0, 1.0, 1.0, level, float(y))
    eta = float(fit.theta.gamma[j - 1] - fit.theta.beta @ x)
    s = float(_eta_se(fit, x, [j - 1])[0])
    value = link_inverse(fit.link, eta)
    se = link_inverse_deriv(fit.link, eta) * s
    lo = link_inverse(fit.link, eta - z * s)
    hi = link_inverse(fit.link, eta + z * s)
    return ConditionalEstimate(EstimateKind.CDF, value, se, min(lo, value), max(hi, value),
                               level, float(y))


def exceedance_prob(fit: FitResult, x, y: float, level: float = 0.95) -> ConditionalEstimate:
    """``P(Y > y | x) = 1 - F(y | x)``."""
    c = conditional_cdf(fit, x, y, level)
    return ConditionalEstimate(EstimateKind.EXCEEDANCE, 1.0 - c.value, c.se, 1.0 - c.ci_high,
                               1.0 - c.ci_low, level, float(y))


def mean_gradient(fit: FitResult, x) -> tuple:
    """Conditional mean and its gradient with respect to ``(gamma, beta)``."""
    x = _check_x(fit, x)
    y = fit.levels
    dy = np.diff(y)
    eta = fit.theta.gamma - fit.theta.beta @ x
    F = link_inverse(fit.link, eta)
    f = link_inverse_deriv(fit.link, eta)
    value = float(y[-1] - np.sum(F * dy))
    grad = np.concatenate([-f * dy, np.sum(f * dy) * x])
    return value, grad


def conditional_mean(fit: FitResult, x, level: float = 0.95) -> ConditionalEstimate:
    """``E(Y | x) = sum_j y_(j) {F(y_(j)|x) - F(y_(j-1)|x)}`` with a normal interval."""
    z = _z(level)
    value, g = mean_gradient(fit, x)
    se = float(np.sqrt(max(g @ fit.robust_cov @ g, 0.0)))
    return ConditionalEstimate(EstimateKind.MEAN, value, se, value - z * se, value + z * se,
                               level)


def _invert(levels, F, tau):
    """Interpolated inverse of the step CDF with left-limit anchors.

    The anchors are ``(y_(j), F(y_(j-1)))`` for ``j = 1..J`` with
    ``F(y_(0)) = 0``: the quantile moves linearly across ``[y_(k), y_(k+1)]``
    while ``tau`` moves across ``(F_{k-1}, F_k]``, so the step CDF evaluated
    at the result is always at least ``tau``.  Returns ``None`` when ``tau``
    exceeds ``F_{J-1}``.
    """
    if tau > F[-1]:
        return None
    anchors = np.concatenate([[0.0], F])
    k = int(np.searchsorted(anchors, tau, side="left"))
    k = max(k, 1)
    lo, hi = anchors[k - 1], anchors[k]
    frac = (tau - lo) / (hi - lo) if hi > lo else 1.0
    return float(levels[k - 1] + frac * (levels[k] - levels[k - 1]))


def conditional_quantile(fit: FitResult, x, tau: float,
                         level: float = 0.95) -> ConditionalEstimate:
    """``Q(tau | x)`` by linear interpolation of the inverse step CDF.

    The interval inverts the pointwise CDF bands in the same way; where the
    lower band never reaches ``tau`` the upper limit is the largest level.

    Raises
    ------
    ExtremeQuantileError
        ``tau`` lies above the fitted CDF at the second-largest level, so
        the quantile would need extrapolation.
    """
    tau = float(tau)
    if not 0.0 < tau < 1.0:
        raise DomainError(f"tau must be in (0, 1), got {tau!r}")
    F, lower, upper = cdf_band(fit, x, level)
    levels = fit.levels
    value = _invert(levels, F, tau)
    if value is None:
        raise ExtremeQuantileError(
            f"tau={tau:g} is outside the attainable range (0, {F[-1]:.6g}] at this covariate "
            "value; the fitted CDF does not reach it below the largest observed level")
    ci_low = _invert(levels, upper, tau)
    ci_high = _invert(levels, lower, tau)
    ci_high = float(levels[-1]) if ci_high is None else ci_high
    return ConditionalEstimate(EstimateKind.QUANTILE, value, None, min(ci_low, value),
                               max(ci_high, value), level, tau)
