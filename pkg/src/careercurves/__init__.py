"""Bayesian clustering and prediction of career production curves.

Subject curves are penalized B-splines whose coefficients are drawn around
cluster-level curves; a covariate-dependent product partition prior groups
subjects by both curve shape and covariates.  Censored careers (active
players) are completed by imputing their game totals.  See README.md for a
tour and demos/ for runnable walkthroughs.
"""

from .basis import KnotSet, aligned_times, bspline_basis, design_matrix, penalty_matrix
from .chainio import read_chain, write_chain
from .evalsim import (
    GROUP_CURVES,
    MODELS,
    MetricReport,
    SyntheticSpec,
    bench_cell,
    fit_competitor,
    generate,
    holdout_protocol,
    lsd,
    mispe,
    r2,
)
from .model import (
    BoxScore,
    GlobalState,
    PlayerRecord,
    PriorConfig,
    SubjectState,
    game_score,
    ingest,
    log_likelihood_subject,
)
from .partition import (
    CovariateProfile,
    Partition,
    SimilarityConfig,
    log_cohesion,
    log_ppmx_prior,
    log_similarity_categorical,
    log_similarity_continuous,
    predictive_allocation_logweights,
)
from .predict import (
    CurveSummary,
    PartitionEstimate,
    active_prediction,
    career_prediction,
    dahl_estimate,
    fitted_curve,
    peak_game,
)
from .sampler import Chain, McmcConfig, ModelState, run_chain, trunc_norm_lower

__version__ = "0.1.0"
