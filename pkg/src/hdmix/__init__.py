"""High-dimensional two-component mixed linear regression: penalized-EM
estimation, debiased coordinate-wise inference, FDR-controlled multiple
testing, a Monte-Carlo simulation harness, and node-wise network
construction."""

from .debias import (
    DebiasedFit,
    SurrogateRow,
    VarianceBlocks,
    build_surrogates,
    debias_fit,
    solve_m,
    variance_blocks,
)
from .em import EmConfig, EmFit, FitWarning, em_fit, em_step, estimate_sigma2_step, lambda_next, working_sample
from .exceptions import ConstructionError, DegenerateDesignError, InvalidInputError
from .inference import (
    IntervalSet,
    TestOutcome,
    by_adjust,
    confidence_intervals,
    fdr_threshold,
    gaussian_tail,
    multi_test,
    reject,
    z_statistics,
)
from .initialization import InitConfig, initialize
from .lasso import LassoSolution, PenalizedLsProblem, kkt_residual, solve_weighted_lasso
from .model import (
    MlrDataset,
    Responsibilities,
    ThetaParams,
    log_likelihood,
    q_function,
    responsibilities,
)
from .simulate import (
    SimDesign,
    TruthBundle,
    emse,
    generate_mlr,
    make_sigma_m,
    run_estimation_experiment,
    run_testing_experiment,
)

__version__ = "0.1.0"
