"""Augmented two-step survey-weighted estimating equations with GEL and GMM."""
from .designs import (
    DesignSpec,
    draw,
    draw_poisson,
    draw_rao_sampford_pps,
    draw_srswor,
    draw_stratified,
    draw_systematic_pps,
    draw_two_stage_cluster,
)
from .estfun import (
    EstimatingSystem,
    NuisancePlugin,
    WeightedDistribution,
    census_ee_augmentation,
    census_solve,
    gini_system,
    lorenz_system,
    mean_system,
    quantile_share_system,
    stack_systems,
    weighted_cdf,
    weighted_quantile,
)
from .estimator import AugmentedGEL
from .gel import CU, EL, ET, GelFit, empirical_probabilities, fit_gel, fit_gmm, gel_objective, inner_max_eta
from .inference import (
    Constraint,
    RatioTest,
    chi2_quantile,
    ci_invert,
    fit_restricted,
    gel_ratio,
    restricted_ratio,
    subvector_ci,
)
from .population import (
    ColumnMap,
    FinitePopulation,
    SurveySample,
    generate_population,
    load_sample_csv,
    rescale_weights,
    write_sample_csv,
)
from .variance import VarianceReport, bootstrap, gamma_resample, sandwich_v2, variance_report

__version__ = "0.1.0"
