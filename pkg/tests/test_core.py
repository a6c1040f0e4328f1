import numpy as np
import pytest

from linverse import (
    DataSet,
    DiscretizedProblem,
    KernelEvaluationError,
    KernelSpec,
    ObjectGrid,
    SupportInterval,
    apply_forward,
    chi_squared,
    discretize_kernel,
    generate_benchmark,
    inner_product_data,
    rmse,
)
from linverse.spectral import SpectralBenchmark, fermionic_kernel, two_gaussian_density

BETA = 10.0


def make_data(ntau=25, beta=BETA, values=None, sigmas=None):
    y = np.linspace(0.0, beta, ntau)
    values = np.zeros(ntau) if values is None else values
    sigmas = np.ones(ntau) if sigmas is None else sigmas
    return DataSet(y=y, values=values, sigmas=sigmas)


def identity_problem(n=6):
    grid = ObjectGrid(0.0, 1.0, n)
    data = make_data(ntau=n, beta=1.0)
    return DiscretizedProblem(grid=grid, data=data, kmatrix=np.eye(n))


# -- grid and data invariants ---------------------------------------------------

def test_grid_spacing_and_endpoints():
    grid = ObjectGrid(-5.0, 5.0, 201)
    assert grid.dx == pytest.approx(0.05)
    assert grid.points[0] == -5.0 and grid.points[-1] == 5.0
    assert np.max(np.abs(np.diff(grid.points) - grid.dx)) < 1e-12 * 10.0


@pytest.mark.parametrize("bad", [dict(a=0, b=1, n=1), dict(a=1, b=1, n=5), dict(a=2, b=1, n=5)])
def test_grid_rejects_bad_setup(bad):
    with pytest.raises(ValueError):
        ObjectGrid(**bad)


def test_dataset_invariants():
    with pytest.raises(ValueError):
        DataSet(y=[0.0, 1.0], values=[1.0, 2.0], sigmas=[1.0, 0.0])
    with pytest.raises(ValueError):
        DataSet(y=[1.0, 0.5], values=[1.0, 2.0], sigmas=[1.0, 1.0])
    with pytest.raises(ValueError):
        DataSet(y=[0.0, 1.0], values=[1.0], sigmas=[1.0, 1.0])


def test_containers_are_immutable():
    problem = identity_problem()
    with pytest.raises(ValueError):
        problem.kmatrix[0, 0] = 7.0
    with pytest.raises(ValueError):
        problem.data.values[0] = 7.0


# -- discretize_kernel ------------------------------------------------------------

def test_constant_kernel_entries():
    grid = ObjectGrid(0.0, 1.0, 11)
    problem = discretize_kernel(
        KernelSpec(evaluator=lambda x, y: np.ones(np.broadcast(x, y).shape)),
        grid,
        make_data(ntau=4, beta=1.0),
    )
    assert problem.kmatrix == pytest.approx(np.full((4, 11), 0.1))


def test_linear_kernel_row():
    grid = ObjectGrid(0.0, 2.0, 3)
    problem = discretize_kernel(
        KernelSpec(evaluator=lambda x, y: x * np.ones_like(y)),
        grid,
        DataSet(y=[0.5], values=[0.0], sigmas=[1.0]),
    )
    assert problem.kmatrix == pytest.approx(np.array([[0.0, 1.0, 2.0]]))


def test_scalar_only_evaluator_fallback():
    def scalar_kernel(x, y):
        if not np.isscalar(x) and getattr(x, "ndim", 0) > 0:
            raise TypeError("scalars only")
        return float(x) + float(y)

    grid = ObjectGrid(0.0, 1.0, 3)
    problem = discretize_kernel(KernelSpec(evaluator=scalar_kernel), grid, make_data(2, 1.0))
    expected = (grid.points[None, :] + np.linspace(0, 1, 2)[:, None]) * grid.dx
    assert problem.kmatrix == pytest.approx(expected)


def test_nonfinite_kernel_reports_offending_point():
    def kernel(x, y):
        return np.where(np.broadcast_to(x, np.broadcast(x, y).shape) > 0.9, np.inf, 1.0)

    grid = ObjectGrid(0.0, 1.0, 11)
    with pytest.raises(KernelEvaluationError) as err:
        discretize_kernel(KernelSpec(evaluator=kernel), grid, make_data(3, 1.0))
    assert "x=1.0" in str(err.value)


def test_fermionic_forward_matches_fine_quadrature_oracle():
    grid = ObjectGrid(-5.0, 5.0, 201)
    data = make_data(ntau=25)
    kernel = KernelSpec(evaluator=lambda x, y: fermionic_kernel(x, y, BETA))
    problem = discretize_kernel(kernel, grid, data)
    g = apply_forward(problem, two_gaussian_density(grid.points))
    # independent oracle: trapezoid quadrature on a 100x finer grid
    xf = np.linspace(-5.0, 5.0, 100 * 200 + 1)
    integrand = fermionic_kernel(xf[None, :], data.y[:, None], BETA) * two_gaussian_density(xf)
    oracle = np.trapezoid(integrand, xf, axis=1)
    assert np.max(np.abs(g - oracle) / np.abs(oracle)) < 1e-4


def test_support_zeroes_kernel_columns():
    grid = ObjectGrid(-5.0, 5.0, 201)
    kernel = KernelSpec(
        evaluator=lambda x, y: fermionic_kernel(x, y, BETA),
        support=SupportInterval(-2.0, 2.0),
    )
    problem = discretize_kernel(kernel, grid, make_data())
    outside = ~kernel.support.contains(grid.points)
    assert np.all(problem.kmatrix[:, outside] == 0.0)
    # forward map is blind to arbitrary changes outside the support
    rng = np.random.default_rng(0)
    a = rng.uniform(0, 1, grid.n)
    b = a.copy()
    b[outside] += rng.normal(0, 100.0, outside.sum())
    assert apply_forward(problem, a) == pytest.approx(apply_forward(problem, b), abs=0.0)


# -- forward map -------------------------------------------------------------------

def test_identity_forward():
    problem = identity_problem()
    a = np.arange(6.0)
    assert apply_forward(problem, a) == pytest.approx(a)
    assert apply_forward(problem, np.zeros(6)) == pytest.approx(np.zeros(6))


def test_forward_dimension_error():
    problem = identity_problem()
    with pytest.raises(ValueError):
        apply_forward(problem, np.zeros(7))


def test_forward_sum_rule_identity():
    # K(x,0) + K(x,beta) = -1/(2pi) pointwise makes G(0)+G(beta) equal
    # -(1/2pi) * integral of A, for any object
    bench = SpectralBenchmark(noise_level=0.0)
    problem, truth = generate_benchmark(bench)
    g = apply_forward(problem, truth)
    xf = np.linspace(-5.0, 5.0, 20001)
    mass_oracle = np.trapezoid(two_gaussian_density(xf), xf)
    assert g[0] + g[-1] == pytest.approx(-mass_oracle / (2 * np.pi), abs=1e-6)


def test_forward_converges_with_grid_refinement():
    # rectangle-weight discretization error vs a near-continuum oracle drops
    # at least linearly as the grid doubles
    data = make_data(ntau=10)
    xf = np.linspace(-5.0, 5.0, 160001)
    integrand = fermionic_kernel(xf[None, :], data.y[:, None], BETA) * two_gaussian_density(xf)
    oracle = np.trapezoid(integrand, xf, axis=1)
    errs = []
    for n in (51, 101, 201):
        grid = ObjectGrid(-5.0, 5.0, n)
        problem = discretize_kernel(
            KernelSpec(evaluator=lambda x, y: fermionic_kernel(x, y, BETA)), grid, data
        )
        g = apply_forward(problem, two_gaussian_density(grid.points))
        errs.append(np.max(np.abs(g - oracle)))
    # halving dx should at least halve the error (up to a modest constant)
    assert errs[1] <= 0.75 * errs[0]
    assert errs[2] <= 0.75 * errs[1]


# -- inner product, chi^2, rmse -------------------------------------------------------

def test_inner_product_examples():
    assert inner_product_data([1.0, 0.0], [0.0, 1.0]) == 0.0
    assert inner_product_data([3.0, 4.0], [3.0, 4.0]) == 25.0
    with pytest.raises(ValueError):
        inner_product_data([1.0], [1.0, 2.0])


def test_inner_product_matches_summation_oracle():
    rng = np.random.default_rng(42)
    v = rng.normal(size=25)
    w = rng.normal(size=25)
    oracle = float(np.sum(v * w))
    assert inner_product_data(v, w) == pytest.approx(oracle, rel=1e-14)


def test_chi_squared_exact_fit_and_unit_residual():
    problem = identity_problem()
    a = np.linspace(0.5, 1.5, 6)
    fitted = DiscretizedProblem(
        grid=problem.grid,
        data=DataSet(y=problem.data.y, values=a, sigmas=np.ones(6)),
        kmatrix=np.eye(6),
    )
    assert chi_squared(fitted, a) == 0.0

    one = DiscretizedProblem(
        grid=ObjectGrid(0.0, 1.0, 2),
        data=DataSet(y=[0.0], values=[2.0], sigmas=[0.5]),
        kmatrix=np.array([[1.0, 0.0]]),
    )
    # forward = 1.5, residual = 0.5 = sigma
    assert chi_squared(one, np.array([1.5, 0.0])) == pytest.approx(1.0)


def test_chi_squared_equals_inner_product_of_residuals():
    bench = SpectralBenchmark(noise_level=0.01, seed=3)
    problem, truth = generate_benchmark(bench)
    r = (problem.data.values - apply_forward(problem, truth)) / problem.data.sigmas
    assert chi_squared(problem, truth) == inner_product_data(r, r)


def test_chi_squared_statistical_consistency():
    # with the true object, chi^2 per point should be ~1 across noise seeds
    vals = []
    for seed in range(100):
        problem, truth = generate_benchmark(SpectralBenchmark(noise_level=0.01, seed=seed))
        vals.append(chi_squared(problem, truth) / problem.n_data)
    mean = np.mean(vals)
    assert 1.0 / 3.0 < mean < 3.0


def test_rmse():
    a = np.arange(10.0)
    assert rmse(a, a) == 0.0
    assert rmse(a + 2.5, a) == pytest.approx(2.5)
    rng = np.random.default_rng(1)
    u, v = rng.normal(size=100), rng.normal(size=100)
    assert rmse(u, v) == pytest.approx(float(np.sqrt(np.mean((u - v) ** 2))), rel=1e-15)
    with pytest.raises(ValueError):
        rmse(u, v[:50])
