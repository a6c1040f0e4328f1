"""Maximum-entropy solvers for the discretized inverse problem.

The objective is

    F(A) = 1/2 sum_i ((G~_i - (K A)_i) / sigma_i)^2
           + alpha sum_j A_j log(A_j / M_j),

the relative-entropy-regularized misfit with respect to a positive default
model M.  Integral constraints enter as quadratic penalties
theta_l (c_l - sum_j g_l(x_j) dx A_j)^2.

Four solvers are provided:

* :func:`std_mem_solve` - iterated least squares: F is expanded to second
  order around the current iterate, the quadratic subproblem is solved in
  closed form through its normal equations, and iterates are relaxed with
  mixing parameter xi.
* :func:`mem_solve_direct` - direct minimization of F over A >= 0 with a
  second-order trust-region method.
* :func:`exp_mem_solve` - minimization in the reparametrization
  A = M exp(f), which removes log(A/M) from the objective and keeps A
  positive by construction (useful where the model underflows).
* :func:`sc_mem_solve` - the self-consistent engine: alternates one of the
  above with a refit of a parametrized model class that maximizes the
  overlap with the current solution.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import minimize

from .core import DiscretizedProblem, IntegralConstraint, bound_arrays

DEFAULT_FLOOR_SCALE = 1e-12
EXP_PARAM_LIMIT = 40.0


class DivergenceError(RuntimeError):
    """Iterates grew without bound; retry with a smaller mixing parameter xi."""


@dataclass(frozen=True)
class ModelClass:
    """Parametrized family of positive default models M(x; f).

    ``evaluator`` maps (grid points, parameter vector) to model values;
    results are clamped to a relative positivity floor so that entropy
    logarithms stay finite even where the family underflows.
    """

    name: str
    evaluator: Callable[[np.ndarray, np.ndarray], np.ndarray]
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lower, dtype=float)
        hi = np.asarray(self.upper, dtype=float)
        if lo.shape != hi.shape or lo.ndim != 1:
            raise ValueError("parameter bounds must be 1-d arrays of equal length")
        if np.any(lo > hi):
            raise ValueError("parameter bounds must satisfy lower <= upper")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def n_params(self) -> int:
        return len(self.lower)

    def clip(self, f: np.ndarray) -> np.ndarray:
        return np.clip(np.asarray(f, dtype=float), self.lower, self.upper)

    def evaluate(self, x: np.ndarray, f: np.ndarray, floor_scale: float = DEFAULT_FLOOR_SCALE) -> np.ndarray:
        m = np.asarray(self.evaluator(x, np.asarray(f, dtype=float)), dtype=float)
        peak = m.max(initial=0.0)
        if not np.isfinite(peak) or peak <= 0:
            raise ValueError(f"model class {self.name!r} produced a non-positive model")
        return np.maximum(m, floor_scale * peak)


@dataclass(frozen=True)
class MEMConfig:
    """Solver knobs shared by every entropy solver.

    ``eps`` is the stop tolerance on successive iterates; ``None`` resolves
    to 1e-6 * ||model||.  ``inner_solver`` selects the engine used inside
    the self-consistent loop ("std", "direct" or "exp").
    """

    alpha: float = 1.0
    xi: float = 0.1
    eps: float | None = None
    max_iters: int = 500
    floor_scale: float = DEFAULT_FLOOR_SCALE
    inner_solver: str = "std"
    max_outer: int = 50

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if not 0 < self.xi < 1:
            raise ValueError(f"xi must lie in (0, 1), got {self.xi}")
        if self.eps is not None and not self.eps > 0:
            raise ValueError(f"eps must be positive, got {self.eps}")
        if not self.floor_scale > 0:
            raise ValueError(f"floor_scale must be positive, got {self.floor_scale}")
        if self.inner_solver not in ("std", "direct", "exp"):
            raise ValueError(f"unknown inner solver {self.inner_solver!r}")

    def resolved_eps(self, model: np.ndarray) -> float:
        return self.eps if self.eps is not None else 1e-6 * float(np.linalg.norm(model))


@dataclass(frozen=True)
class MEMSolution:
    """Solver result: the object vector and convergence bookkeeping."""

    a: np.ndarray
    f_value: float
    iterations: int
    converged: bool
    model_params: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        arr = np.asarray(self.a, dtype=float).copy()
        if np.any(arr < 0):
            raise ValueError("solution must be nonnegative")
        arr.flags.writeable = False
        object.__setattr__(self, "a", arr)


# -- entropy and likelihood ---------------------------------------------------

def _check_pair(a: np.ndarray, model: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=float)
    model = np.asarray(model, dtype=float)
    if a.shape != model.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {model.shape}")
    if np.any(model <= 0):
        raise ValueError("model values must be strictly positive")
    if np.any(a < 0):
        raise ValueError("object values must be nonnegative")
    return a, model


def entropy(a: np.ndarray, model: np.ndarray) -> float:
    """Relative entropy -sum_j A_j log(A_j / M_j), with 0 log 0 = 0.

    For inputs of equal total weight the value is <= 0 and vanishes exactly
    at A = M.  Note the asymmetry: entropy(A, M) != entropy(M, A) in general.
    """
    a, model = _check_pair(a, model)
    terms = np.where(a > 0, a * np.log(np.where(a > 0, a, 1.0) / model), 0.0)
    return float(-np.sum(terms))


def noninformative_entropy(a: np.ndarray) -> float:
    """Self-normalized entropy -sum_j p_j log p_j with p = A / sum(A).

    Favors the flat object.  Provided for completeness; none of the solvers
    use it.
    """
    a = np.asarray(a, dtype=float)
    if np.any(a < 0):
        raise ValueError("object values must be nonnegative")
    total = a.sum()
    if total <= 0:
        raise ValueError("object must carry positive total weight")
    p = a / total
    terms = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    return float(-np.sum(terms))


def likelihood(problem: DiscretizedProblem, a: np.ndarray, model: np.ndarray, alpha: float) -> float:
    """Objective F(A) = 1/2 chi^2(A) - alpha * entropy(A, M)."""
    a = np.asarray(a, dtype=float)
    resid = (problem.data.values - problem.kmatrix @ a) / problem.data.sigmas
    return float(0.5 * np.sum(resid**2) - alpha * entropy(a, model))


def _constraint_rows(problem: DiscretizedProblem) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stacked (weights, targets, thetas) for the attached integral constraints."""
    cons = problem.integral_constraints
    if not cons:
        n = problem.n_grid
        return np.zeros((0, n)), np.zeros(0), np.zeros(0)
    w = np.vstack([c.weights(problem.grid) for c in cons])
    t = np.array([c.c for c in cons])
    th = np.array([c.resolved_theta() for c in cons])
    return w, t, th


def penalized_likelihood(
    problem: DiscretizedProblem, a: np.ndarray, model: np.ndarray, alpha: float
) -> float:
    """F(A) plus the quadratic penalties of the attached integral constraints."""
    w, t, th = _constraint_rows(problem)
    pen = float(np.sum(th * (t - w @ np.asarray(a, dtype=float)) ** 2))
    return likelihood(problem, a, model, alpha) + pen


def likelihood_gradient(
    problem: DiscretizedProblem,
    a: np.ndarray,
    model: np.ndarray,
    alpha: float,
    penalized: bool = False,
) -> np.ndarray:
    """Analytic gradient of F (optionally including the constraint penalties).

    Requires strictly positive A; the entropy term contributes
    alpha (log(A/M) + 1) per component.
    """
    a, model = _check_pair(a, model)
    if np.any(a <= 0):
        raise ValueError("gradient requires strictly positive object values")
    s2 = problem.data.sigmas**2
    grad = -problem.kmatrix.T @ ((problem.data.values - problem.kmatrix @ a) / s2)
    grad = grad + alpha * (np.log(a / model) + 1.0)
    if penalized:
        w, t, th = _constraint_rows(problem)
        if len(t):
            grad = grad - 2.0 * w.T @ (th * (t - w @ a))
    return grad


# -- standard iterated-least-squares solver -----------------------------------

def std_mem_quadratic_terms(a0: np.ndarray, model: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Second-order expansion terms of the entropy part around a0.

    Returns (target, offset) such that, for objects of equal total weight,

        sum_j A_j log(A_j/M_j)
            ~= sum_j [ (target_j - A_j)^2 / (2 a0_j) + offset_j ]

    with target_j = a0_j (1 - log(a0_j/M_j)) and
    offset_j = M_j - a0_j (1 - log(a0_j/M_j) + log^2(a0_j/M_j) / 2).
    """
    a0 = np.asarray(a0, dtype=float)
    model = np.asarray(model, dtype=float)
    if a0.shape != model.shape:
        raise ValueError(f"shape mismatch: {a0.shape} vs {model.shape}")
    if np.any(a0 <= 0) or np.any(model <= 0):
        raise ValueError("expansion point and model must be strictly positive")
    t = np.log(a0 / model)
    target = a0 * (1.0 - t)
    offset = model - a0 * (1.0 - t + 0.5 * t * t)
    return target, offset


def _renormalize(a: np.ndarray, problem: DiscretizedProblem) -> np.ndarray:
    """Rescale to make a labeled normalization constraint exact, if present."""
    for con in problem.integral_constraints:
        if con.label == "normalization":
            w = con.weights(problem.grid)
            total = w @ a
            if total > 0 and con.c > 0:
                return a * (con.c / total)
    return a


def std_mem_solve(
    problem: DiscretizedProblem,
    model: np.ndarray,
    config: MEMConfig = MEMConfig(),
    history_sink: Callable[[dict], None] | None = None,
) -> MEMSolution:
    """Iterated least-squares minimization of the entropy objective.

    Starting from A = M, each step minimizes the second-order expansion of
    F around the current center by solving its normal equations exactly,
    clamps the result to the positivity floor (and any bound constraints),
    and mixes centers with weight xi.  Stops when successive least-squares
    solutions differ by less than eps.

    Non-convergence within ``max_iters`` is reported through the
    ``converged`` flag; iterates growing past 1e12 raise
    :class:`DivergenceError`.
    """
    model = np.asarray(model, dtype=float)
    if np.any(model <= 0) or model.max() <= 0:
        raise ValueError("model must be strictly positive on the grid")
    floor = config.floor_scale * model.max()
    mc = np.maximum(model, floor)
    eps = config.resolved_eps(model)
    alpha = config.alpha

    s2 = problem.data.sigmas**2
    km = problem.kmatrix
    base_matrix = km.T @ (km / s2[:, None])
    base_rhs = km.T @ (problem.data.values / s2)
    w, t, th = _constraint_rows(problem)
    if len(t):
        base_matrix = base_matrix + 2.0 * (w.T * th) @ w
        base_rhs = base_rhs + 2.0 * w.T @ (th * t)
    lo, hi = bound_arrays(problem)
    lo = np.maximum(lo, floor)

    a_cur = mc.copy()
    a0 = mc.copy()
    converged = False
    iterations = 0
    for n in range(config.max_iters):
        a0c = np.clip(a0, lo, hi)
        target, _ = std_mem_quadratic_terms(a0c, mc)
        matrix = base_matrix + np.diag(alpha / a0c)
        rhs = base_rhs + alpha * target / a0c
        a_new = np.clip(np.linalg.solve(matrix, rhs), lo, hi)
        if not np.all(np.isfinite(a_new)) or np.linalg.norm(a_new) > 1e12:
            raise DivergenceError(
                f"iterates diverged at step {n + 1}; try a smaller xi than {config.xi}"
            )
        step = float(np.linalg.norm(a_new - a_cur))
        if history_sink is not None:
            residuals = (t - w @ a0c).tolist() if len(t) else []
            history_sink(
                {
                    "iteration": n + 1,
                    "f_value": likelihood(problem, a0c, mc, alpha),
                    "constraint_residuals": residuals,
                    "step": step,
                }
            )
        a0 = config.xi * a_new + (1.0 - config.xi) * a_cur
        a_cur = a_new
        iterations = n + 1
        if step < eps:
            converged = True
            break

    a_final = np.clip(a0, lo, hi)
    a_final = _renormalize(a_final, problem)
    return MEMSolution(
        a=a_final,
        f_value=likelihood(problem, np.maximum(a_final, floor), mc, alpha),
        iterations=iterations,
        converged=converged,
    )


# -- direct bound-constrained minimization ------------------------------------

def mem_solve_direct(
    problem: DiscretizedProblem,
    model: np.ndarray,
    config: MEMConfig = MEMConfig(),
) -> MEMSolution:
    """Direct minimization of the penalized objective over A >= floor.

    Uses a trust-region interior method with the analytic gradient and
    Hessian; the entropy Hessian diag(alpha / A) makes second-order
    information essential at realistic sigma scales.
    """
    model = np.asarray(model, dtype=float)
    if np.any(model <= 0) or model.max() <= 0:
        raise ValueError("model must be strictly positive on the grid")
    floor = config.floor_scale * model.max()
    mc = np.maximum(model, floor)
    alpha = config.alpha

    s2 = problem.data.sigmas**2
    km = problem.kmatrix
    data = problem.data.values
    w, t, th = _constraint_rows(problem)
    base_hess = km.T @ (km / s2[:, None])
    if len(t):
        base_hess = base_hess + 2.0 * (w.T * th) @ w
    lo, hi = bound_arrays(problem)
    lo = np.maximum(lo, floor)
    hi = np.where(np.isfinite(hi), hi, np.inf)

    def fun(a):
        ac = np.maximum(a, floor)
        resid = (data - km @ a) / problem.data.sigmas
        pen = np.sum(th * (t - w @ a) ** 2) if len(t) else 0.0
        return 0.5 * np.sum(resid**2) + alpha * np.sum(a * np.log(ac / mc)) + pen

    def grad(a):
        ac = np.maximum(a, floor)
        g = -km.T @ ((data - km @ a) / s2) + alpha * (np.log(ac / mc) + 1.0)
        if len(t):
            g = g - 2.0 * w.T @ (th * (t - w @ a))
        return g

    def hess(a):
        return base_hess + np.diag(alpha / np.maximum(a, floor))

    start = np.clip(mc, lo, hi)
    res = minimize(
        fun,
        start,
        jac=grad,
        hess=hess,
        method="trust-constr",
        bounds=list(zip(lo, hi)),
        options=dict(maxiter=config.max_iters, gtol=1e-10, xtol=1e-14),
    )
    a_final = _renormalize(np.maximum(res.x, 0.0), problem)
    return MEMSolution(
        a=a_final,
        f_value=likelihood(problem, np.maximum(a_final, floor), mc, alpha),
        iterations=int(res.nit),
        converged=bool(res.success or res.status in (1, 2)),
    )


# -- exponential reparametrization ---------------------------------------------

def exp_mem_solve(
    problem: DiscretizedProblem,
    model: np.ndarray,
    config: MEMConfig = MEMConfig(),
) -> MEMSolution:
    """Minimization over f with A = M exp(f).

    The entropy term becomes alpha sum_j M_j e^{f_j} f_j, which contains no
    logarithm of A/M and therefore tolerates models that underflow to the
    positivity floor.  f is box-limited to +/-40; hitting that limit is
    reported in the solution metadata.
    """
    model = np.asarray(model, dtype=float)
    if np.any(model <= 0) or model.max() <= 0:
        raise ValueError("model must be strictly positive on the grid")
    floor = config.floor_scale * model.max()
    mc = np.maximum(model, floor)
    alpha = config.alpha

    s2 = problem.data.sigmas**2
    km = problem.kmatrix
    data = problem.data.values
    w, t, th = _constraint_rows(problem)
    base_hess = km.T @ (km / s2[:, None])
    if len(t):
        base_hess = base_hess + 2.0 * (w.T * th) @ w

    def a_of(f):
        return mc * np.exp(f)

    def fun(f):
        a = a_of(f)
        resid = (data - km @ a) / problem.data.sigmas
        pen = np.sum(th * (t - w @ a) ** 2) if len(t) else 0.0
        return 0.5 * np.sum(resid**2) + alpha * np.sum(a * f) + pen

    def grad_a(a):
        g = -km.T @ ((data - km @ a) / s2) + alpha * (np.log(a / mc) + 1.0)
        if len(t):
            g = g - 2.0 * w.T @ (th * (t - w @ a))
        return g

    def grad(f):
        a = a_of(f)
        return grad_a(a) * a

    def hess(f):
        a = a_of(f)
        h_a = base_hess + np.diag(alpha / a)
        return a[:, None] * h_a * a[None, :] + np.diag(grad_a(a) * a)

    res = minimize(
        fun,
        np.zeros(problem.n_grid),
        jac=grad,
        hess=hess,
        method="trust-constr",
        bounds=[(-EXP_PARAM_LIMIT, EXP_PARAM_LIMIT)] * problem.n_grid,
        options=dict(maxiter=config.max_iters, gtol=1e-10, xtol=1e-14),
    )
    clamped = int(np.sum(np.abs(res.x) >= EXP_PARAM_LIMIT - 1e-9))
    a_final = _renormalize(a_of(res.x), problem)
    return MEMSolution(
        a=a_final,
        f_value=likelihood(problem, np.maximum(a_final, floor), mc, alpha),
        iterations=int(res.nit),
        converged=bool(res.success or res.status in (1, 2)),
        meta={"clamped_components": clamped},
    )


# -- model refits and the self-consistent engine --------------------------------

def overlap(a: np.ndarray, model: np.ndarray) -> float:
    """Normalized squared inner product (sum A M)^2 / (sum A^2 sum M^2) in [0, 1].

    Equal to 1 exactly when the two vectors are proportional; invariant
    under rescaling of either argument.
    """
    a = np.asarray(a, dtype=float)
    model = np.asarray(model, dtype=float)
    if a.shape != model.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {model.shape}")
    na = float(np.dot(a, a))
    nm = float(np.dot(model, model))
    if na == 0.0 or nm == 0.0:
        raise ValueError("overlap is undefined for an all-zero vector")
    return float(np.dot(a, model) ** 2 / (na * nm))


def fit_model(
    a: np.ndarray,
    model_class: ModelClass,
    f0: np.ndarray,
    grid_points: np.ndarray,
) -> np.ndarray:
    """Parameters maximizing the overlap of the class with the object ``a``.

    Runs a bounded derivative-free search from f0 and from the center of
    the parameter box, and never returns a parameter set with lower overlap
    than f0 (stagnation falls back to the starting point).
    """
    f0 = model_class.clip(f0)
    x = np.asarray(grid_points, dtype=float)

    def negative_overlap(f):
        return -overlap(a, model_class.evaluate(x, f))

    bounds = list(zip(model_class.lower, model_class.upper))
    best_f, best_val = f0, negative_overlap(f0)
    midpoint = 0.5 * (model_class.lower + model_class.upper)
    for start in (f0, midpoint):
        res = minimize(
            negative_overlap,
            start,
            method="Powell",
            bounds=bounds,
            options=dict(maxiter=5000, xtol=1e-9, ftol=1e-12),
        )
        if res.fun < best_val:
            best_val, best_f = float(res.fun), model_class.clip(res.x)
    return best_f


_INNER_SOLVERS = {
    "std": std_mem_solve,
    "direct": mem_solve_direct,
    "exp": exp_mem_solve,
}


def sc_mem_solve(
    problem: DiscretizedProblem,
    model_class: ModelClass,
    f0: np.ndarray,
    config: MEMConfig = MEMConfig(),
    history_sink: Callable[[dict], None] | None = None,
) -> MEMSolution:
    """Self-consistent loop: entropy solve, overlap refit, repeat.

    Each cycle evaluates the model class at the current parameters (rescaled
    to a labeled normalization constraint when one is attached), runs the
    configured inner solver, and refits the parameters to maximize overlap
    with the new solution.  Terminates once successive solutions differ by
    less than eps, or after ``max_outer`` cycles (reported via
    ``converged``).
    """
    inner = _INNER_SOLVERS[config.inner_solver]
    f = model_class.clip(f0)
    x = problem.grid.points

    def build_model(params):
        m = model_class.evaluate(x, params, config.floor_scale)
        return _renormalize(m, problem)

    a_prev = None
    solution = None
    iterations = 0
    converged = False
    for outer in range(config.max_outer):
        model = build_model(f)
        try:
            solution = inner(problem, model, config)
        except DivergenceError as err:
            raise DivergenceError(
                f"inner solver diverged in self-consistent cycle {outer + 1} "
                f"with parameters {f.tolist()}"
            ) from err
        iterations = outer + 1
        if history_sink is not None:
            history_sink(
                {
                    "iteration": iterations,
                    "f_value": solution.f_value,
                    "params": f.tolist(),
                    "inner_iterations": solution.iterations,
                }
            )
        if a_prev is not None and np.linalg.norm(solution.a - a_prev) < config.resolved_eps(model):
            converged = True
            break
        a_prev = solution.a
        f = fit_model(solution.a, model_class, f, x)
    if not converged:
        warnings.warn(
            f"self-consistent loop hit the outer-iteration cap ({config.max_outer})",
            stacklevel=2,
        )
    return replace(solution, model_params=f, iterations=iterations, converged=converged)


# -- common model classes --------------------------------------------------------

def _normal_pdf(x: np.ndarray, mu: float, sigma: float) -> np.ndarray:
    z = (x - mu) / sigma
    return np.exp(-0.5 * z * z) / (sigma * np.sqrt(2.0 * np.pi))


def gaussian_model_class(
    weight_bounds: tuple[float, float] = (0.01, 5.0),
    mean_bounds: tuple[float, float] = (-5.0, 5.0),
    width_bounds: tuple[float, float] = (0.05, 3.0),
) -> ModelClass:
    """Single Gaussian bump: f = (weight, mean, width)."""

    def evaluate(x, f):
        return f[0] * _normal_pdf(x, f[1], f[2])

    return ModelClass(
        name="gaussian",
        evaluator=evaluate,
        lower=np.array([weight_bounds[0], mean_bounds[0], width_bounds[0]]),
        upper=np.array([weight_bounds[1], mean_bounds[1], width_bounds[1]]),
    )


def two_gaussian_model_class(
    weight_bounds: tuple[float, float] = (0.01, 5.0),
    mean_bounds: tuple[float, float] = (-5.0, 5.0),
    width_bounds: tuple[float, float] = (0.05, 3.0),
) -> ModelClass:
    """Mixture of two Gaussians: f = (w1, w2, mu1, mu2, s1, s2)."""

    def evaluate(x, f):
        return f[0] * _normal_pdf(x, f[2], f[4]) + f[1] * _normal_pdf(x, f[3], f[5])

    lo = np.array([weight_bounds[0]] * 2 + [mean_bounds[0]] * 2 + [width_bounds[0]] * 2)
    hi = np.array([weight_bounds[1]] * 2 + [mean_bounds[1]] * 2 + [width_bounds[1]] * 2)
    return ModelClass(name="two_gaussian", evaluator=evaluate, lower=lo, upper=hi)
