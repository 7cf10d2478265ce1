"""Carryover effects in recurrent-event processes.

Simulation, likelihood fitting and tests of whether an event temporarily
raises the rate of further events, allowing for between-subject
heterogeneity.
"""

from .core import (
    CarryoverSpec,
    Constant,
    Dataset,
    EventHistory,
    FitResult,
    FrailtySpec,
    PiecewiseConstant,
    PowerLaw,
    TestResult,
    Violation,
    dataset_from_json,
    dataset_to_json,
    delta_from_c,
    validate_dataset,
)
from .diagnostics import (
    ObsExpRow,
    StepFunction,
    extract_gaps,
    gap_hazard_piecewise,
    nelson_aalen_mean,
    obs_exp_table,
    piecewise_hazard,
)
from .estimate import (
    fit_fixed,
    fit_poisson,
    fit_random,
    loglik_random,
    profile_delta,
    profile_loglik_fixed,
)
from .exposure import (
    carryover_exposure,
    carryover_indicator,
    conditional_frailty_intensity,
    exposure_summary,
    r_integral,
)
from .io import DataError, ingest_csv
from .score import (
    bootstrap_pvalue_fixed,
    bootstrap_pvalue_random,
    lr_test,
    score_test_fixed,
    score_test_random,
    wald_test,
)
from .semiparam import ag_frailty_score, ag_score, breslow_increments, fit_ag, fit_ag_frailty
from .simulate import FixedTau, SimConfig, UniformTau, simulate_dataset, simulate_process
from .study import StudyConfig, run_mc_study

__version__ = "0.1.0"
