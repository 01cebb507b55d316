"""dsrkit: spatial-confounding estimation toolkit.

Double spatial regression with cross-fitting, its no-crossfit and
theoretical variants, and the comparator estimators (gSEM, spatial-plus,
spatial LMM, OLS) on a dense Gaussian-process engine, plus a reproducible
Monte Carlo study harness and a CLI.
"""

from .errors import (
    AllFailed,
    BadFoldCount,
    BootstrapFailed,
    BoundsInverted,
    DegenerateHat,
    DimensionMismatch,
    DomainError,
    DsrError,
    DuplicateKnots,
    EmptyGrid,
    EmptyInput,
    NotPerfectSquare,
    NotPositiveDefinite,
    NuggetOnCrossMatrix,
    OptimFailed,
    RankDeficient,
    SingularMeanDesign,
    SmallFoldWarning,
)
from .estimators import (
    Dataset,
    EstimateResult,
    FixedSpecWorkingModel,
    FoldAssignment,
    RemlWorkingModel,
    ZeroWorkingModel,
    bootstrap_ci,
    dsr_crossfit,
    dsr_nocrossfit,
    dsr_theoretical,
    fit_gsem,
    fit_lmm,
    fit_ols,
    fit_spatialplus,
    median_aggregate,
    partition_folds,
    sandwich_variance,
)
from .harness import (
    MethodConfig,
    MetricsRow,
    MetricsTable,
    compute_metrics,
    run_method,
    run_replication,
    run_study,
)
from .kernels import KernelSpec, correlation, correlation_matrix
from .numerics import (
    RngStream,
    SpdFactor,
    chol_solve,
    cholesky,
    gamma_shape1_quantile,
    gaussian_loglik,
    nelder_mead,
    normal_cdf,
    rng_stream,
)
from .simgen import (
    ROUGH_KERNEL,
    SMOOTH_KERNEL,
    VERY_ROUGH_KERNEL,
    ScenarioConfig,
    draw_joint_AZ,
    gen_scenario,
    make_scenario,
    sample_locations,
)
from .smoothers import (
    GpFit,
    SplineFit,
    TvSelection,
    clip_values,
    fit_gp_given,
    fit_gp_reml,
    fit_spline_gcv,
    krige_predict,
    select_knots,
    spline_design,
    spline_predict,
    theoretical_krige,
    tv_grid_select,
)

__version__ = "0.1.0"
