"""Discretized linear inverse problems.

The continuous problem G(y) = int K(x, y) A(x) dx is reduced to the linear
map G_i = sum_j K_ij A_j with K_ij = K(x_j, y_i) * dx on a uniform grid of
object points x_j.  This module holds the grid, data and kernel containers,
the discretization step, and the residual metrics shared by every solver.

All containers are frozen dataclasses: instances are immutable after
construction and safe to share across threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class KernelEvaluationError(ValueError):
    """Kernel returned a non-finite value at some (x, y) node."""


def _as_float_array(a, name: str) -> np.ndarray:
    arr = np.asarray(a, dtype=float)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be one-dimensional, got shape {arr.shape}")
    return arr


@dataclass(frozen=True)
class ObjectGrid:
    """Uniform discretization of the object support interval [a, b].

    Parameters
    ----------
    a, b : float
        Interval endpoints, both included in the grid.
    n : int
        Number of grid points, at least 2.
    """

    a: float
    b: float
    n: int
    points: np.ndarray = field(init=False, repr=False, compare=False)
    dx: float = field(init=False, compare=False)

    def __post_init__(self):
        if self.n < 2:
            raise ValueError(f"grid needs at least 2 points, got n={self.n}")
        if not self.b > self.a:
            raise ValueError(f"grid requires b > a, got a={self.a}, b={self.b}")
        pts = np.linspace(self.a, self.b, self.n)
        pts.flags.writeable = False
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "dx", (self.b - self.a) / (self.n - 1))


@dataclass(frozen=True)
class DataSet:
    """Measurement points y_i, observed values, and their standard deviations."""

    y: np.ndarray
    values: np.ndarray
    sigmas: np.ndarray

    def __post_init__(self):
        y = _as_float_array(self.y, "y")
        v = _as_float_array(self.values, "values")
        s = _as_float_array(self.sigmas, "sigmas")
        if not (len(y) == len(v) == len(s)) or len(y) < 1:
            raise ValueError(
                f"y, values, sigmas must share a length >= 1, got {len(y)}, {len(v)}, {len(s)}"
            )
        if np.any(np.diff(y) <= 0):
            raise ValueError("measurement points y must be strictly increasing")
        if np.any(s <= 0):
            raise ValueError("all sigmas must be positive")
        for name, arr in (("y", y), ("values", v), ("sigmas", s)):
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    def __len__(self) -> int:
        return len(self.y)


@dataclass(frozen=True)
class SupportInterval:
    """Open interval (a, b) outside of which the object is assumed to vanish."""

    a: float
    b: float

    def __post_init__(self):
        if not self.a < self.b:
            raise ValueError(f"support requires a < b, got ({self.a}, {self.b})")

    def contains(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x) > self.a) & (np.asarray(x) < self.b)


@dataclass(frozen=True)
class KernelSpec:
    """Kernel evaluator K(x, y) with an optional support restriction.

    The evaluator must be deterministic and accept numpy broadcasting
    (scalar fallback is handled by :func:`discretize_kernel`).
    """

    evaluator: Callable[[np.ndarray, np.ndarray], np.ndarray]
    support: SupportInterval | None = None


@dataclass(frozen=True)
class IntegralConstraint:
    """Linear constraint int g(x) A(x) dx = c.

    ``theta`` is the penalty stiffness used by the maximum-entropy solvers;
    ``None`` selects the default rule 1e4 / c^2 at solve time.  ``label``
    tags special roles ("normalization" enables the final rescaling step in
    the entropy solvers).
    """

    g: Callable[[np.ndarray], np.ndarray]
    c: float
    theta: float | None = None
    label: str = ""

    def __post_init__(self):
        if self.theta is not None and self.theta < 0:
            raise ValueError(f"constraint stiffness must be >= 0, got {self.theta}")

    def weights(self, grid: ObjectGrid) -> np.ndarray:
        """Discretized row w_j = g(x_j) * dx so that w @ A approximates the integral."""
        w = np.asarray(self.g(grid.points), dtype=float) * grid.dx
        if w.shape != grid.points.shape:
            raise ValueError("constraint function g must evaluate elementwise on the grid")
        return w

    def resolved_theta(self) -> float:
        if self.theta is not None:
            return self.theta
        return 1e4 / max(self.c * self.c, 1e-30)


@dataclass(frozen=True)
class BoundConstraint:
    """Pointwise bound l <= A(x) <= u at one grid location."""

    x: float
    lower: float
    upper: float

    def __post_init__(self):
        if self.lower > self.upper:
            raise ValueError(f"bound requires lower <= upper, got [{self.lower}, {self.upper}]")


@dataclass(frozen=True)
class DiscretizedProblem:
    """Kernel matrix plus the grid, data and constraints it was built from."""

    grid: ObjectGrid
    data: DataSet
    kmatrix: np.ndarray
    integral_constraints: tuple[IntegralConstraint, ...] = ()
    bound_constraints: tuple[BoundConstraint, ...] = ()
    support: SupportInterval | None = None

    def __post_init__(self):
        km = np.asarray(self.kmatrix, dtype=float)
        if km.shape != (len(self.data), self.grid.n):
            raise ValueError(
                f"kernel matrix shape {km.shape} does not match "
                f"(n_data, n_grid) = ({len(self.data)}, {self.grid.n})"
            )
        if not np.all(np.isfinite(km)):
            i, j = np.argwhere(~np.isfinite(km))[0]
            raise KernelEvaluationError(
                f"non-finite kernel matrix entry at x={self.grid.points[j]}, y={self.data.y[i]}"
            )
        km = km.copy()
        km.flags.writeable = False
        object.__setattr__(self, "kmatrix", km)
        object.__setattr__(self, "integral_constraints", tuple(self.integral_constraints))
        object.__setattr__(self, "bound_constraints", tuple(self.bound_constraints))

    @property
    def n_data(self) -> int:
        return len(self.data)

    @property
    def n_grid(self) -> int:
        return self.grid.n


def _evaluate_kernel(evaluator, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Evaluate K on the (y_i, x_j) product grid, vectorized when possible."""
    try:
        km = np.asarray(evaluator(x[None, :], y[:, None]), dtype=float)
        if km.shape == (len(y), len(x)):
            return km
    except Exception:
        pass
    km = np.empty((len(y), len(x)))
    for i, yi in enumerate(y):
        for j, xj in enumerate(x):
            km[i, j] = evaluator(xj, yi)
    return km


def discretize_kernel(kernel: KernelSpec, grid: ObjectGrid, data: DataSet) -> DiscretizedProblem:
    """Build the discrete map K_ij = K(x_j, y_i) * dx.

    Grid columns outside the kernel's support interval are zeroed exactly,
    which is equivalent to multiplying the kernel by the indicator of the
    support.  Non-finite kernel values raise :class:`KernelEvaluationError`
    naming the offending node.
    """
    km = _evaluate_kernel(kernel.evaluator, grid.points, data.y)
    if not np.all(np.isfinite(km)):
        i, j = np.argwhere(~np.isfinite(km))[0]
        raise KernelEvaluationError(
            f"kernel evaluated to a non-finite value at x={grid.points[j]}, y={data.y[i]}"
        )
    km = km * grid.dx
    if kernel.support is not None:
        km[:, ~kernel.support.contains(grid.points)] = 0.0
    return DiscretizedProblem(grid=grid, data=data, kmatrix=km, support=kernel.support)


def apply_forward(problem: DiscretizedProblem, a: np.ndarray) -> np.ndarray:
    """Forward map G_i = sum_j K_ij A_j."""
    a = _as_float_array(a, "object vector")
    if len(a) != problem.n_grid:
        raise ValueError(f"object vector length {len(a)} != grid size {problem.n_grid}")
    return problem.kmatrix @ a


def inner_product_data(v: np.ndarray, w: np.ndarray) -> float:
    """Euclidean inner product in data space (uncorrelated-data convention).

    Correlation weighting would replace this single function; nothing else
    in the solvers assumes a particular bilinear form.
    """
    v = _as_float_array(v, "v")
    w = _as_float_array(w, "w")
    if len(v) != len(w):
        raise ValueError(f"length mismatch: {len(v)} vs {len(w)}")
    return float(np.dot(v, w))


def chi_squared(problem: DiscretizedProblem, a: np.ndarray) -> float:
    """Unhalved statistic sum_i ((G~_i - G_i) / sigma_i)^2 for the forward map of ``a``."""
    g = apply_forward(problem, a)
    r = (problem.data.values - g) / problem.data.sigmas
    return inner_product_data(r, r)


def rmse(a: np.ndarray, a_ref: np.ndarray) -> float:
    """Root mean square difference between two object vectors."""
    a = _as_float_array(a, "a")
    a_ref = _as_float_array(a_ref, "a_ref")
    if len(a) != len(a_ref):
        raise ValueError(f"length mismatch: {len(a)} vs {len(a_ref)}")
    return float(np.sqrt(np.mean((a - a_ref) ** 2)))


def nonnegativity_bounds(grid: ObjectGrid) -> tuple[BoundConstraint, ...]:
    """A(x_j) >= 0 at every grid point."""
    return tuple(BoundConstraint(x=float(x), lower=0.0, upper=np.inf) for x in grid.points)


def bound_arrays(problem: DiscretizedProblem) -> tuple[np.ndarray, np.ndarray]:
    """Lower/upper bound vectors over the grid from the attached bound constraints.

    Bounds are matched to grid points by nearest position; unconstrained
    points get (-inf, inf).
    """
    lo = np.full(problem.n_grid, -np.inf)
    hi = np.full(problem.n_grid, np.inf)
    for bc in problem.bound_constraints:
        j = int(np.argmin(np.abs(problem.grid.points - bc.x)))
        lo[j] = max(lo[j], bc.lower)
        hi[j] = min(hi[j], bc.upper)
    return lo, hi


def with_constraints(
    problem: DiscretizedProblem,
    integral_constraints: Sequence[IntegralConstraint] = (),
    bound_constraints: Sequence[BoundConstraint] = (),
) -> DiscretizedProblem:
    """Copy of ``problem`` with constraints attached."""
    return DiscretizedProblem(
        grid=problem.grid,
        data=problem.data,
        kmatrix=problem.kmatrix,
        integral_constraints=tuple(integral_constraints),
        bound_constraints=tuple(bound_constraints),
        support=problem.support,
    )


def with_data(problem: DiscretizedProblem, data: DataSet) -> DiscretizedProblem:
    """Copy of ``problem`` with a different data set on the same y points."""
    if len(data) != problem.n_data or not np.array_equal(data.y, problem.data.y):
        raise ValueError("replacement data must live on the same measurement points")
    return DiscretizedProblem(
        grid=problem.grid,
        data=data,
        kmatrix=problem.kmatrix,
        integral_constraints=problem.integral_constraints,
        bound_constraints=problem.bound_constraints,
        support=problem.support,
    )
