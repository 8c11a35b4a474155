"""Distributional reference equations for spirometry: BCCG GAMLSS, a segmented
linear baseline, and tail-calibration diagnostics."""

__version__ = "0.1.0"

from .distributions import (  # noqa: E402
    BccgParams,
    DomainError,
    OutOfSupportError,
    bccg_cdf,
    bccg_logpdf,
    bccg_quantile,
    bccg_sample,
    bccg_zscore,
    normal_cdf,
    normal_quantile,
)
from .gamlss import (  # noqa: E402
    FittedGamlssModel,
    GamlssSpec,
    ParamFormula,
    SmoothTerm,
    fit_gamlss,
    information_criteria,
    lln_curve,
    predict_params,
    zscores,
)
from .segmented import FittedSlrModel, fit_slr, slr_lln, slr_predict, slr_zscore  # noqa: E402
