"""Generalized latent factor models for multivariate longitudinal data."""

__version__ = "0.1.0"

from .errors import (
    ConfigurationError,
    InputError,
    LongFactorError,
    NumericError,
    RankDeficiencyError,
    UndefinedMetricError,
    UnsupportedInitError,
)
from .estimator import FitOptions, FitResult, fit
from .inference import InferenceReport, by_adjust, infer, permutation_test_B, phi_hat, sigma_E, wald_test
from .init import InitOptions, initial_values, random_init, svd_init
from .model import (
    Dataset,
    Layout,
    ModelSpec,
    ParameterSet,
    build_design_row,
    family_b,
    joint_loglik,
    predict_natural_params,
)
from .normalize import normalize_beta_only, normalize_full
from .predict import RecommendationConfig, predict_proba_next, recommend, residual_deviance, sensitivity
from .selection import SelectionResult, penalty_lambda, select_k
from .simulate import MetricReport, SimConfig, SimTruth, compute_metrics, generate, run_study
