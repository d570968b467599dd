"""Matrix-free stochastic trace estimation.

Estimators range from the plain quadratic-form average to leave-one-out
deflation over the degree-two Krylov block of the test vectors, with
optional averaging over random orthogonal resamplings that costs no extra
matvecs. A benchmark harness reproduces RMS-error sweeps on synthetic
diagonal spectra, and a CLI exposes estimation, benchmarking, a fixed
rotation sweep, and the invariance check suites.
"""

from .bench import (
    BenchConfig,
    BenchRow,
    ConditionalCheckReport,
    CorrelationReport,
    ESTIMATOR_NAMES,
    conditional_mc_check,
    resampling_correlation,
    rotation_sweep,
    run_benchmark,
    write_csv,
)
from .errors import (
    BasisSaturationError,
    DegeneratePairError,
    DegenerateResidualError,
    EstimationError,
    InvalidInputError,
    InvalidSpecError,
    RankDeficientError,
    SingularFactorError,
)
from .estimators import (
    EstimateReport,
    KrylovFactors,
    build_krylov_factors,
    check_last_column_dependence,
    girard_hutchinson,
    leave_one_out,
    leave_one_out_full,
    loo_full_from_factors,
    projected_gh,
    xtrace_full,
    xtrace_full_naive,
    xtrace_naive,
)
from .kernels import (
    IDENTITY_FIRST_HAAR,
    IID_UNIT_VECTORS,
    KAC_WALK,
    QRFactors,
    RotationStrategy,
    economy_qr,
    next_rotation,
    orth_basis,
    ql_orthonormalize_pair,
    sample_gaussian,
    sample_haar_orthogonal,
    solve_transposed_upper,
)
from .operators import (
    FAMILIES,
    MatFreeOperator,
    SpectrumSpec,
    exact_trace,
    make_dense_operator,
    make_diagonal_operator,
    make_identity_operator,
    make_spectrum,
)

__version__ = "0.1.0"
