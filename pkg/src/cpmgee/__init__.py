"""Cumulative probability models for clustered continuous responses."""

__version__ = "0.1.0"

from .conditional import (ConditionalEstimate, conditional_cdf, conditional_mean,  # noqa: E402
                          conditional_quantile, exceedance_prob)
from .dataset import (ClusteredDataset, ColumnMapping, OrdinalEncoding,  # noqa: E402
                      bin_equal_quantile, encode_ordinal, load_csv, round_responses)
from .geecorr import GEEOptions, WorkingCorrelation, estimate_alpha, one_step_fit  # noqa: E402
from .kernels import BACKEND  # noqa: E402
from .linkfun import LinkFamily, link_eval, link_inverse  # noqa: E402
from .npmle import FitOptions, FitResult, Theta, fit_independence  # noqa: E402

__all__ = [
    "BACKEND", "ClusteredDataset", "ColumnMapping", "ConditionalEstimate", "FitOptions",
    "FitResult", "GEEOptions", "LinkFamily", "OrdinalEncoding", "Theta", "WorkingCorrelation",
    "bin_equal_quantile", "conditional_cdf", "conditional_mean", "conditional_quantile",
    "encode_ordinal", "estimate_alpha", "exceedance_prob", "fit_independence", "link_eval",
    "link_inverse", "load_csv", "one_step_fit", "round_responses",
]
