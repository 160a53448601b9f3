"""Iteratively regularized Newton methods for ill-posed operator equations
with general data misfit functionals and Poisson count data."""

from .core import (
    FeasibilityError,
    ForwardModel,
    Grid,
    GridAlignmentError,
    IdentityGram,
    InvalidInputError,
    QuadraticPenalty,
    Signal,
    SobolevGram,
    UnsupportedModeError,
    bregman_distance,
    check_adjoint,
    check_derivative,
    penalty_value,
)
from .misfit import (
    KLMisfit,
    L2Misfit,
    Misfit,
    OffsetParam,
    PearsonMisfit,
    kl_divergence,
    l2_misfit,
    pearson_phi2,
    poisson_neg_loglik,
    quadratic_model,
)
from .poisson import (
    Binning,
    CountData,
    bin_adjoint,
    bin_apply,
    bin_project,
    err_discretization,
    err_n_estimate,
    err_poisson,
    replicate_seed,
    sample_counts,
)
from .rates import (
    IndexFunction,
    RateAssumptions,
    big_psi,
    fit_rate,
    hoelder,
    hoelder_additive,
    lambda_of,
    log_index,
    psi_of,
    tangential_cone_probe,
    theta,
    vartheta,
)
from .solver import (
    IterateTrace,
    NewtonConfig,
    inner_gauss_newton,
    run_newton,
    solve_inner_ls,
)
from .stopping import (
    APrioriHoelderRule,
    APrioriLogRule,
    APrioriThetaRule,
    LepskiiRule,
    MaxIterRule,
    OracleRule,
    StoppingRule,
    a_priori_stop_hoelder,
    a_priori_stop_log,
    a_priori_stop_theta,
    lepskii_select,
    oracle_stop,
)
from .problems import (
    DeconvolutionModel,
    PhaseRetrievalModel,
    load_matrix_csv,
    make_cell_phantom,
    periodic_gaussian_kernel,
    save_matrix_csv,
    sobolev_symbol,
)

__version__ = "0.1.0"
