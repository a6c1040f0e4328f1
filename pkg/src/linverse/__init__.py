"""Linear inverse problems with statistically noisy data.

Two solver families for the discretized problem G_i = sum_j K_ij A_j:
truncated singular-system analysis (with support restriction and
constraint handling) and maximum-entropy regularization (iterated least
squares, direct, exponential-reparametrized, and self-consistent variants),
plus the imaginary-time analytic-continuation benchmark they are exercised
on.
"""

from .core import (
    BoundConstraint,
    DataSet,
    DiscretizedProblem,
    IntegralConstraint,
    KernelEvaluationError,
    KernelSpec,
    ObjectGrid,
    SupportInterval,
    apply_forward,
    chi_squared,
    discretize_kernel,
    inner_product_data,
    nonnegativity_bounds,
    rmse,
    with_constraints,
    with_data,
)
from .mem import (
    DivergenceError,
    MEMConfig,
    MEMSolution,
    ModelClass,
    entropy,
    exp_mem_solve,
    fit_model,
    gaussian_model_class,
    likelihood,
    likelihood_gradient,
    mem_solve_direct,
    noninformative_entropy,
    overlap,
    penalized_likelihood,
    sc_mem_solve,
    std_mem_quadratic_terms,
    std_mem_solve,
    two_gaussian_model_class,
)
from .spectral import (
    DeltaPairTruth,
    ResolutionCell,
    SpectralBenchmark,
    delta_pair_propagator,
    detect_peaks,
    fermionic_kernel,
    generate_benchmark,
    resolution_cell,
    resolution_experiment,
    resolution_limits,
    two_gaussian_object,
)
from .svd import (
    CoefficientSet,
    ConstraintInfeasibleError,
    DegenerateProblemError,
    SingularSystem,
    build_gram,
    compute_singular_system,
    constrained_svd_solve,
    expansion_coefficients,
    reconstruct,
    truncation_index,
)

__version__ = "0.1.0"
