"""Link functions for cumulative probability models.

A link ``G`` maps a cumulative probability to the linear-predictor scale;
its inverse ``G^{-1} = F_eps`` is the CDF of the residual distribution.
All functions accept scalars or numpy arrays and are vectorised.

Conventions for the extreme-value links::

    loglog:   F(eta) = exp(-exp(-eta))
    cloglog:  F(eta) = 1 - exp(-exp(eta))
"""

from __future__ import annotations

import enum

import numpy as np
from scipy import special

from .errors import DomainError

#: Probabilities returned by :func:`link_inverse` are clipped to
#: ``[PROB_CLAMP, 1 - PROB_CLAMP]``.
PROB_CLAMP = 1e-12

# exp() overflows for |eta| > ~709; every CDF and density is saturated there.
_ETA_LIMIT = 700.0

_SQRT_2PI = np.sqrt(2.0 * np.pi)


class LinkFamily(str, enum.Enum):
    LOGIT = "logit"
    PROBIT = "probit"
    LOGLOG = "loglog"
    CLOGLOG = "cloglog"

    @classmethod
    def parse(cls, value) -> "LinkFamily":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            choices = ", ".join(m.value for m in cls)
            raise DomainError(f"unknown link {value!r}; expected one of {choices}") from None

    @property
    def code(self) -> int:
        """Integer tag used by the compiled kernels."""
        return _CODES[self]


_CODES = {
    LinkFamily.LOGIT: 0,
    LinkFamily.PROBIT: 1,
    LinkFamily.LOGLOG: 2,
    LinkFamily.CLOGLOG: 3,
}


def _out(x, like):
    return float(x) if np.ndim(like) == 0 else x


def link_eval(link, p):
    """Evaluate the link ``G(p)`` for probabilities strictly inside (0, 1)."""
    link = LinkFamily.parse(link)
    arr = np.asarray(p, dtype=float)
    if np.any(~np.isfinite(arr)) or np.any(arr <= 0.0) or np.any(arr >= 1.0):
        raise DomainError("link_eval requires 0 < p < 1")
    if link is LinkFamily.LOGIT:
        out = special.logit(arr)
    elif link is LinkFamily.PROBIT:
        out = special.ndtri(arr)
    elif link is LinkFamily.LOGLOG:
        out = -np.log(-np.log(arr))
    else:
        out = np.log(-np.log1p(-arr))
    return _out(out, p)


def _raw_cdf(link, eta):
    if link is LinkFamily.LOGIT:
        return special.expit(eta)
    if link is LinkFamily.PROBIT:
        return special.ndtr(eta)
    if link is LinkFamily.LOGLOG:
        return np.exp(-np.exp(-eta))
    return -np.expm1(-np.exp(eta))


def link_inverse(link, eta):
    """Residual CDF ``F_eps(eta)``, clamped away from 0 and 1."""
    link = LinkFamily.parse(link)
    e = np.clip(np.asarray(eta, dtype=float), -_ETA_LIMIT, _ETA_LIMIT)
    out = np.clip(_raw_cdf(link, e), PROB_CLAMP, 1.0 - PROB_CLAMP)
    return _out(out, eta)


def cdf_survival(link, eta):
    """Unclamped ``(F(eta), 1 - F(eta))``, each computed without cancellation.

    Used internally for cell probabilities ``F(b) - F(a)``, which are taken
    from whichever of the two tails keeps full relative precision.
    """
    link = LinkFamily.parse(link)
    e = np.clip(np.asarray(eta, dtype=float), -_ETA_LIMIT, _ETA_LIMIT)
    if link is LinkFamily.LOGIT:
        F, S = special.expit(e), special.expit(-e)
    elif link is LinkFamily.PROBIT:
        F, S = special.ndtr(e), special.ndtr(-e)
    elif link is LinkFamily.LOGLOG:
        t = np.exp(-e)
        F, S = np.exp(-t), -np.expm1(-t)
    else:
        t = np.exp(e)
        F, S = -np.expm1(-t), np.exp(-t)
    return _out(F, eta), _out(S, eta)


def cell_probability(F_lo, S_lo, F_hi, S_hi):
    """``F_hi - F_lo`` evaluated on the lower or upper tail as appropriate."""
    return np.where(F_hi <= 0.5, F_hi - F_lo, S_lo - S_hi)


def link_inverse_deriv(link, eta):
    """Residual density ``f_eps(eta) = dF/deta``."""
    link = LinkFamily.parse(link)
    e = np.clip(np.asarray(eta, dtype=float), -_ETA_LIMIT, _ETA_LIMIT)
    if link is LinkFamily.LOGIT:
        t = np.exp(-np.abs(e))
        out = t / (1.0 + t) ** 2
    elif link is LinkFamily.PROBIT:
        out = np.exp(-0.5 * e * e) / _SQRT_2PI
    elif link is LinkFamily.LOGLOG:
        out = np.exp(-e - np.exp(-e))
    else:
        out = np.exp(e - np.exp(e))
    return _out(out, eta)


def link_inverse_deriv2(link, eta):
    """Derivative of the residual density, ``f_eps'(eta)``."""
    link = LinkFamily.parse(link)
    e = np.clip(np.asarray(eta, dtype=float), -_ETA_LIMIT, _ETA_LIMIT)
    f = link_inverse_deriv(link, e)
    if link is LinkFamily.LOGIT:
        out = -f * np.tanh(0.5 * e)
    elif link is LinkFamily.PROBIT:
        out = -e * f
    elif link is LinkFamily.LOGLOG:
        # f is exactly 0 wherever exp(-e) is huge, avoid 0 * inf
        out = np.where(f > 0.0, f * np.expm1(-e), 0.0)
    else:
        out = np.where(f > 0.0, -f * np.expm1(e), 0.0)
    return _out(out, eta)

