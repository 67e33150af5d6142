"""Doubly robust estimation of an outcome mean with nonignorable missing
outcomes, using a fully observed shadow variable.

Typical use::

    from shadowdr import Dataset, estimate, run_inference, gof_phi, gof_psi

    report = run_inference(data)          # point estimates + bootstrap SEs
    gof_phi(report), gof_psi(report)      # diagnostics for the baseline models
"""

__version__ = "0.1.0"

from .data import Dataset, ObservedSample
from .errors import *  # noqa: F401,F403
from .estimation import (
    FitResult,
    MomentBasisSpec,
    SolverConfig,
    fit_alpha_gamma,
    fit_beta,
    fit_phi,
    fit_psi,
)
from .estimators import (
    EstimateReport,
    PipelineConfig,
    WorkingModels,
    bias1_population,
    estimate,
    mar_estimators,
    mu1,
    mu2,
    mu3,
    mu_reg,
)
from .inference import BootstrapConfig, GofTestResult, bootstrap_ses, gof_phi, gof_psi, run_inference
from .models import (
    BaselineOutcomeSpec,
    BaselinePropensitySpec,
    ExtendedOutcomeSpec,
    ExtendedWeightSpec,
    OddsRatioSpec,
    extended_outcome_mean,
    extended_propensity,
    extended_weight,
    odds_ratio,
    propensity,
    shadow_conditional_mean,
    tilted_mean_fn,
    tilted_mean_y,
    tilted_normalizer,
    weight,
)
from .simulation import ScenarioConfig, StudyResult, acceptance_grid, generate_dataset, run_study, true_mean
from .terms import Design, Term
