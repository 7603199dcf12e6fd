"""Mutual influence regression: estimation, selection, adequacy testing and simulation."""

__version__ = "0.1.0"

from .estimate import FitOptions, FitResult, fit_qmle, info_I, info_J, sandwich
from .extensions import (
    fit_covariates,
    fit_endogenous,
    fit_individual_effects,
    fit_interactions,
    fit_time_effects,
)
from .gof import GofResult, influence_test
from .model import MirData, Theta, concentrated_loglik, full_loglik, score
from .select import SelectionResult, ebic, select_subsets
from .simlab import SimConfig, SimReport, run_study
from .weights import AttributePanel, WeightSet, build_weight_set

__all__ = [
    "AttributePanel",
    "FitOptions",
    "FitResult",
    "GofResult",
    "MirData",
    "SelectionResult",
    "SimConfig",
    "SimReport",
    "Theta",
    "WeightSet",
    "build_weight_set",
    "concentrated_loglik",
    "ebic",
    "fit_covariates",
    "fit_endogenous",
    "fit_individual_effects",
    "fit_interactions",
    "fit_qmle",
    "fit_time_effects",
    "full_loglik",
    "influence_test",
    "info_I",
    "info_J",
    "run_study",
    "sandwich",
    "score",
    "select_subsets",
]
