import numpy as np
import pytest

from linverse import (
    CoefficientSet,
    ConstraintInfeasibleError,
    DataSet,
    DegenerateProblemError,
    DiscretizedProblem,
    IntegralConstraint,
    KernelSpec,
    ObjectGrid,
    SupportInterval,
    apply_forward,
    build_gram,
    chi_squared,
    compute_singular_system,
    constrained_svd_solve,
    discretize_kernel,
    expansion_coefficients,
    generate_benchmark,
    reconstruct,
    rmse,
    truncation_index,
)
from linverse.spectral import SpectralBenchmark, fermionic_kernel

BETA = 10.0


def make_problem(ntau=25, beta=BETA, grid_n=201, support=None):
    grid = ObjectGrid(-5.0, 5.0, grid_n)
    y = np.linspace(0.0, beta, ntau)
    data = DataSet(y=y, values=np.full(ntau, -0.05), sigmas=np.full(ntau, 1e-3))
    kernel = KernelSpec(evaluator=lambda x, t: fermionic_kernel(x, t, beta), support=support)
    return discretize_kernel(kernel, grid, data)


def synthetic_problem(kmatrix, sigmas=None, values=None):
    ntau, n = kmatrix.shape
    grid = ObjectGrid(0.0, 1.0, n)
    data = DataSet(
        y=np.arange(ntau, dtype=float),
        values=np.zeros(ntau) if values is None else values,
        sigmas=np.ones(ntau) if sigmas is None else sigmas,
    )
    return DiscretizedProblem(grid=grid, data=data, kmatrix=kmatrix)


# -- Gram matrix -----------------------------------------------------------------

def test_gram_of_orthonormal_rows_is_identity():
    rng = np.random.default_rng(0)
    q, _ = np.linalg.qr(rng.normal(size=(30, 8)))
    problem = synthetic_problem(q.T)
    assert build_gram(problem) == pytest.approx(np.eye(8), abs=1e-12)


def test_gram_duplicated_row_is_rank_deficient():
    rng = np.random.default_rng(1)
    k = rng.normal(size=(5, 12))
    k[3] = k[1]
    gram = build_gram(synthetic_problem(k))
    w = np.linalg.eigvalsh(gram)
    assert w[0] < 1e-12 * w[-1]


def test_gram_matches_double_loop_oracle():
    problem = make_problem()
    gram = build_gram(problem)
    km = problem.kmatrix
    oracle = np.empty_like(gram)
    for i in range(km.shape[0]):
        for j in range(km.shape[0]):
            oracle[i, j] = np.sum(km[i] * km[j])
    assert gram == pytest.approx(oracle, rel=1e-13, abs=1e-300)


# -- singular system ---------------------------------------------------------------

def test_identity_kernel_singular_system():
    problem = synthetic_problem(np.eye(6))
    system = compute_singular_system(problem)
    assert system.rank == 6
    assert system.lambdas == pytest.approx(np.ones(6))
    assert system.vectors == pytest.approx(np.eye(6))
    assert system.functions == pytest.approx(np.eye(6))


def test_zero_kernel_is_degenerate():
    with pytest.raises(DegenerateProblemError):
        compute_singular_system(synthetic_problem(np.zeros((4, 9))))


def test_rank_tol_validation():
    with pytest.raises(ValueError):
        compute_singular_system(make_problem(), rank_tol=0.0)


def test_rank_saturates_with_data_count():
    m20 = compute_singular_system(make_problem(ntau=20)).rank
    m100 = compute_singular_system(make_problem(ntau=100)).rank
    assert m20 == 20
    assert 22 <= m100 <= 27
    assert m100 - m20 <= 6


def test_shifted_eigenvalue_relations():
    problem = make_problem()
    system = compute_singular_system(problem)
    lam1 = system.lambdas[0]
    r1 = problem.kmatrix @ system.functions - system.vectors * system.lambdas
    r2 = problem.kmatrix.T @ system.vectors - system.functions * system.lambdas
    assert np.linalg.norm(r1, axis=0).max() < 1e-8 * lam1
    assert np.linalg.norm(r2, axis=0).max() < 1e-8 * lam1


def test_singular_vectors_orthonormal():
    system = compute_singular_system(make_problem())
    gram_v = system.vectors.T @ system.vectors
    gram_u = system.functions.T @ system.functions
    assert np.abs(gram_v - np.eye(system.rank)).max() < 1e-10
    assert np.abs(gram_u - np.eye(system.rank)).max() < 1e-8


def test_singular_function_node_counts():
    # the i-th singular function changes sign exactly i-1 times
    system = compute_singular_system(make_problem())
    for i in range(10):
        u = system.functions[:, i]
        keep = np.abs(u) > 1e-8 * np.abs(u).max()
        signs = np.sign(u[keep])
        assert int(np.sum(signs[1:] != signs[:-1])) == i


def test_support_shrinkage_speeds_decay():
    # a narrower support accelerates singular-value decay: the count of
    # modes above a fixed relative level cannot grow
    full = compute_singular_system(make_problem())
    narrow = compute_singular_system(make_problem(support=SupportInterval(-2.0, 2.0)))
    count = lambda s: int(np.sum(s.lambdas / s.lambdas[0] >= 0.01))
    assert count(narrow) <= count(full)


def test_permutation_covariance():
    problem = make_problem(ntau=12)
    system = compute_singular_system(problem)
    rng = np.random.default_rng(5)
    perm = rng.permutation(12)
    permuted = synthetic_problem(
        problem.kmatrix[perm],
        sigmas=problem.data.sigmas[perm],
        values=problem.data.values[perm],
    )
    system_p = compute_singular_system(permuted)
    assert system_p.lambdas == pytest.approx(system.lambdas, rel=1e-10)
    # vectors permute rows, functions are unchanged, both up to sign
    for i in range(system.rank):
        v_ref, v_new = system.vectors[perm, i], system_p.vectors[:, i]
        sign = np.sign(np.dot(v_ref, v_new))
        assert v_new == pytest.approx(sign * v_ref, abs=1e-8)
        assert system_p.functions[:, i] == pytest.approx(
            sign * system.functions[:, i], abs=1e-8
        )


# -- expansion coefficients -----------------------------------------------------------

def test_identity_system_coefficients():
    values = np.array([3.0, -1.0, 2.0, 0.5])
    sigmas = np.array([0.1, 0.2, 0.3, 0.4])
    problem = synthetic_problem(np.eye(4), sigmas=sigmas, values=values)
    system = compute_singular_system(problem)
    coeffs = expansion_coefficients(system, problem.data)
    assert coeffs.b == pytest.approx(values)
    assert coeffs.db == pytest.approx(sigmas)


def test_uncertainty_grows_inversely_with_singular_value():
    k = np.diag([1.0, 1e-6]) @ np.ones((2, 2)) * 0.5 + np.diag([1.0, 1e-6])
    k = np.diag([1.0, 1e-6])  # two decoupled modes
    problem = synthetic_problem(np.column_stack([k, np.zeros((2, 3))]),
                                sigmas=np.array([0.1, 0.1]),
                                values=np.array([1.0, 1.0]))
    system = compute_singular_system(problem, rank_tol=1e-9)
    coeffs = expansion_coefficients(system, problem.data)
    assert coeffs.db[1] / coeffs.db[0] == pytest.approx(1e6, rel=1e-9)


def test_noiseless_normal_solution_accuracy():
    problem, truth = generate_benchmark(SpectralBenchmark(noise_level=0.0))
    system = compute_singular_system(problem)
    coeffs = expansion_coefficients(system, problem.data)
    solution = reconstruct(system, coeffs, system.rank)
    assert rmse(solution, truth) < 0.02


# -- truncation rule ---------------------------------------------------------------------

def test_noiseless_truncation_keeps_everything():
    problem, _ = generate_benchmark(SpectralBenchmark(noise_level=0.0))
    system = compute_singular_system(problem)
    assert truncation_index(system, problem.data) == system.rank


def test_one_percent_noise_truncates_at_expected_level():
    problem, _ = generate_benchmark(SpectralBenchmark(noise_level=0.01, seed=0))
    system = compute_singular_system(problem)
    r_cut = truncation_index(system, problem.data)
    rel = system.lambdas / system.lambdas[0]
    # the mean relative error is ~0.01, so the rule keeps iff lambda ratio >= ~0.01
    assert r_cut == int(np.sum(rel >= 0.01))


def test_huge_noise_gives_empty_solution():
    values = np.full(10, -0.05)
    problem = synthetic_problem(np.eye(10), sigmas=np.abs(values) * 10, values=values)
    system = compute_singular_system(problem)
    assert truncation_index(system, problem.data) == 0


def test_zero_data_values_warn_and_are_excluded():
    values = np.array([1.0, 0.0, 1.0, 1.0])
    problem = synthetic_problem(np.eye(4), sigmas=np.full(4, 0.5), values=values)
    system = compute_singular_system(problem)
    with pytest.warns(UserWarning, match="zero data value"):
        r = truncation_index(system, problem.data)
    assert r == int(np.sum(system.lambdas / system.lambdas[0] >= 0.5))

    all_zero = synthetic_problem(np.eye(4), values=np.zeros(4))
    with pytest.raises(ValueError):
        truncation_index(system, all_zero.data)


# -- reconstruction ------------------------------------------------------------------------

def test_reconstruct_zero_terms_is_zero():
    problem, _ = generate_benchmark(SpectralBenchmark(noise_level=0.0))
    system = compute_singular_system(problem)
    coeffs = expansion_coefficients(system, problem.data)
    assert reconstruct(system, coeffs, 0) == pytest.approx(np.zeros(problem.n_grid))
    with pytest.raises(ValueError):
        reconstruct(system, coeffs, system.rank + 1)


def test_full_reconstruction_reproduces_noiseless_data():
    problem, _ = generate_benchmark(SpectralBenchmark(noise_level=0.0))
    system = compute_singular_system(problem)
    coeffs = expansion_coefficients(system, problem.data)
    solution = reconstruct(system, coeffs, system.rank)
    fit = apply_forward(problem, solution)
    rel = np.linalg.norm(fit - problem.data.values) / np.linalg.norm(problem.data.values)
    assert rel < 1e-8


def test_rmse_sweep_has_interior_minimum():
    # too few modes underfit, too many amplify the noise; the rule lands
    # near the sweet spot
    problem, truth = generate_benchmark(SpectralBenchmark(noise_level=0.01, seed=12))
    system = compute_singular_system(problem)
    coeffs = expansion_coefficients(system, problem.data)
    r_rule = truncation_index(system, problem.data)
    err_rule = rmse(reconstruct(system, coeffs, r_rule), truth)
    err_under = rmse(reconstruct(system, coeffs, 3), truth)
    err_over = rmse(reconstruct(system, coeffs, system.rank), truth)
    assert err_rule < err_under
    assert err_rule < err_over


# -- constrained coefficient optimization ----------------------------------------------------

def test_degenerate_box_returns_b_or_raises():
    problem, _ = generate_benchmark(SpectralBenchmark(noise_level=0.0))
    system = compute_singular_system(problem)
    coeffs = expansion_coefficients(system, problem.data)
    frozen = CoefficientSet(b=coeffs.b, db=np.zeros_like(coeffs.db))
    solution = reconstruct(system, coeffs, system.rank)

    # a constraint satisfied exactly at b passes through
    target = float(np.sum(solution) * problem.grid.dx)
    ok = IntegralConstraint(g=lambda x: np.ones_like(x), c=target)
    out = constrained_svd_solve(problem, system, frozen, [ok])
    assert out == pytest.approx(solution)

    bad = IntegralConstraint(g=lambda x: np.ones_like(x), c=target + 1.0)
    with pytest.raises(ConstraintInfeasibleError):
        constrained_svd_solve(problem, system, frozen, [bad])


def test_chisq_cost_cannot_worsen_feasible_point():
    problem, _ = generate_benchmark(SpectralBenchmark(noise_level=0.01, seed=4))
    system = compute_singular_system(problem)
    coeffs = expansion_coefficients(system, problem.data)
    base = reconstruct(system, coeffs, system.rank)
    target = float(np.sum(base) * problem.grid.dx)
    con = IntegralConstraint(g=lambda x: np.ones_like(x), c=target)
    out = constrained_svd_solve(problem, system, coeffs, [con], cost="chisq")
    assert chi_squared(problem, out) <= chi_squared(problem, base) * (1 + 1e-9) + 1e-9


def test_constrained_solution_meets_benchmark_constraints():
    problem, truth = generate_benchmark(SpectralBenchmark(noise_level=0.01, seed=4))
    system = compute_singular_system(problem)
    coeffs = expansion_coefficients(system, problem.data)
    constrained = constrained_svd_solve(problem, system, coeffs, cost="norm")
    for con in problem.integral_constraints:
        w = con.weights(problem.grid)
        assert abs(con.c - w @ constrained) <= max(1e-6 * abs(con.c), 1e-10)
    # imposing true constraints must not degrade the reconstruction much
    r_rule = truncation_index(system, problem.data)
    err_tsvd = rmse(reconstruct(system, coeffs, r_rule), truth)
    assert rmse(constrained, truth) <= 1.1 * err_tsvd


def test_unknown_cost_rejected():
    problem, _ = generate_benchmark(SpectralBenchmark(noise_level=0.0))
    system = compute_singular_system(problem)
    coeffs = expansion_coefficients(system, problem.data)
    with pytest.raises(ValueError):
        constrained_svd_solve(problem, system, coeffs, cost="entropy")
    with pytest.raises(ValueError):
        constrained_svd_solve(problem, system, coeffs, [])
