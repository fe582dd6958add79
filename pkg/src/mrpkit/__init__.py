"""Multilevel regression and poststratification for nonprobability samples.

The package estimates population and subgroup means from a nonprobability
sample with four MRP variants (S, P, R, INT), classical weighting
estimators (poststratification, IPW, raking, GREG, doubly robust),
synthetic populations from the weighted finite population Bayesian
bootstrap, closed-form bias diagnostics and a repeated-sampling harness.
"""

__version__ = "0.1.0"

from .cells import (
    CellAlignment,
    CellTable,
    CovariateSchema,
    Grouping,
    Microdata,
    align_cells,
    build_cell_table,
    stack_samples,
)
from .design import (
    EstimateSummary,
    PropensityFit,
    dr_mean,
    fit_inclusion_model,
    greg_mean,
    greg_weights,
    ipw_mean,
    ipw_weights,
    jackknife_se,
    poststratified_mean,
    rake_weights,
    raking_mean,
    unweighted_mean,
    with_jackknife,
)
from .diagnostics import PopulationSpec, analytic_bias, conditional_variances, simulate_bias, stochastic_bias
from .errors import ConvergenceError, DataError, MrpError, NumericalError, SeparationError
from .formula import ModelTerms, parse_formula
from .hb import (
    McmcConfig,
    OutcomeModelSpec,
    PosteriorDraws,
    PriorSpec,
    cell_means,
    effective_sample_size,
    mcse,
    rhat,
    sample_posterior_linear,
    sample_posterior_logistic,
)
from .mrp import (
    MrpResult,
    MrpVariant,
    PsiPredictor,
    build_psi_predictors,
    mrp_estimate,
    mrp_fit,
    poststratify_draws,
    shrinkage_estimate,
)
from .sim import SimConfig, SimReport, draw_samples, generate_population, run_study
from .wfpbb import (
    bayesian_bootstrap,
    estimate_pop_cells,
    polya_urn_expand,
    recalibrate_weights,
    synthetic_populations,
)
