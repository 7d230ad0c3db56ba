"""Confounder-adjusted hierarchical Bayesian analysis of labor-induction
outcomes, with a synthetic-cohort simulator of score-driven treatment
assignment, a from-scratch NUTS sampler, and MCMC diagnostics."""

__version__ = "0.1.0"

from .cohort import (
    Cohort,
    CohortError,
    OutcomeTransform,
    PatientRecord,
    PreparedData,
    boxcox,
    fit_lambda,
    inv_boxcox,
    load_cohort,
    preprocess_outcomes,
    save_cohort,
)
from .model import ModelSpec, ParameterSpace, PosteriorDensity, log_posterior
from .ordinal import CutpointSet, cutpoints_from_simplex, ordered_logistic_pmf
from .pipeline import FitResult, fit_cohort
from .sampler import NutsConfig, PosteriorDraws, sample
from .simulate import SimTruth, calibration_truth, default_truth, simulate_cohort
