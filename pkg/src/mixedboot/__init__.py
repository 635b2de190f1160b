"""Bootstrap inference for two-level nested linear mixed-effects models."""

from __future__ import annotations

from .core import ClusterBlock, GroupedData, ModelSpec, Parameters, build_design, read_table, simulate_response
from .formula import parse_formula
from .inference import BUILTIN_STATISTICS, combine, confint, extract_parameters, fixef, icc, summarize, varcomp
from .reml import FittedModel, eblups, fit_reml, profiled_deviance
from .resamplers import (
    BootstrapConfig,
    bootstrap,
    case_resample,
    parametric_resample,
    reb_resample,
    recenter_estimates,
    residual_resample,
    uncorrelate_varcomps,
    wild_resample,
)
from .residuals import center_and_reflate, model_residuals, nonparametric_residuals
from .results import BootstrapResult, NamedStatistic, read_result

__all__ = [
    "BUILTIN_STATISTICS", "BootstrapConfig", "BootstrapResult", "ClusterBlock", "FittedModel", "GroupedData",
    "ModelSpec", "NamedStatistic", "Parameters", "bootstrap", "build_design", "case_resample",
    "center_and_reflate", "combine", "confint", "eblups", "extract_parameters", "fit_reml", "fixef", "icc",
    "model_residuals", "nonparametric_residuals", "parametric_resample", "parse_formula", "profiled_deviance",
    "read_result", "read_table", "reb_resample", "recenter_estimates", "residual_resample", "simulate_response",
    "summarize", "uncorrelate_varcomps", "varcomp", "wild_resample",
]
