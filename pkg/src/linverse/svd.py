"""Singular-system analysis of the discretized kernel.

The data-space Gram matrix (K K^T)_ij = (K_i, K_j) of the kernel rows is
diagonalized to obtain the singular system: singular values lambda_i,
orthonormal data-space vectors v_i, and object-space functions u_i with

    K u_i = lambda_i v_i,        K^T v_i = lambda_i u_i.

The minimum-norm (normal) solution is the expansion sum_i b_i u_i with
b_i = (v_i, G) / lambda_i; noisy data are handled by dropping terms whose
singular value falls below a noise-determined cut-off (TSVD), and integral
constraints by re-optimizing the coefficients inside their uncertainty box.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import lsq_linear

from .core import (
    DataSet,
    DiscretizedProblem,
    IntegralConstraint,
    chi_squared,
    inner_product_data,
)

DEFAULT_RANK_TOL = 1e-10


class DegenerateProblemError(RuntimeError):
    """The kernel matrix has no positive singular values."""


class ConstraintInfeasibleError(RuntimeError):
    """No coefficient set inside the uncertainty box satisfies the constraints."""


@dataclass(frozen=True)
class SingularSystem:
    """Singular values (descending), data-space vectors and object-space functions.

    ``vectors`` has shape (n_data, rank) with columns v_i; ``functions`` has
    shape (n_grid, rank) with columns u_i sampled on the object grid.
    """

    lambdas: np.ndarray
    vectors: np.ndarray
    functions: np.ndarray
    rank: int = field(init=False, compare=False)

    def __post_init__(self):
        lam = np.asarray(self.lambdas, dtype=float)
        if lam.ndim != 1 or len(lam) < 1:
            raise ValueError("need at least one singular value")
        if np.any(lam <= 0):
            raise ValueError("singular values must be positive")
        if np.any(np.diff(lam) > 0):
            raise ValueError("singular values must be sorted descending")
        v = np.asarray(self.vectors, dtype=float)
        u = np.asarray(self.functions, dtype=float)
        if v.shape[1] != len(lam) or u.shape[1] != len(lam):
            raise ValueError("vectors/functions column count must equal len(lambdas)")
        for name, arr in (("lambdas", lam), ("vectors", v), ("functions", u)):
            arr = arr.copy()
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "rank", len(lam))


@dataclass(frozen=True)
class CoefficientSet:
    """Expansion coefficients b_i and their conservative uncertainties db_i."""

    b: np.ndarray
    db: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.b, dtype=float)
        db = np.asarray(self.db, dtype=float)
        if b.shape != db.shape or b.ndim != 1:
            raise ValueError("b and db must be 1-d arrays of equal length")
        if np.any(db < 0):
            raise ValueError("uncertainties db must be nonnegative")
        for name, arr in (("b", b), ("db", db)):
            arr = arr.copy()
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)


def build_gram(problem: DiscretizedProblem) -> np.ndarray:
    """Gram matrix of the discretized kernel rows, (i, j) -> sum_k K_ik K_jk."""
    km = problem.kmatrix
    return km @ km.T


def _fix_signs(vectors: np.ndarray, functions: np.ndarray) -> None:
    # reproducible orientation: first component of v_i that is resolvably
    # nonzero is made positive (u_i flips with v_i to keep K u = lam v)
    for i in range(vectors.shape[1]):
        col = vectors[:, i]
        big = np.abs(col) > 1e-12 * np.abs(col).max()
        lead = col[np.argmax(big)]
        if lead < 0:
            vectors[:, i] = -col
            functions[:, i] = -functions[:, i]


def compute_singular_system(
    problem: DiscretizedProblem, rank_tol: float = DEFAULT_RANK_TOL
) -> SingularSystem:
    """Diagonalize the kernel Gram matrix and assemble the singular system.

    The eigenpairs of K K^T are obtained through the singular value
    decomposition of K itself: the v_i are the left singular vectors (the
    Gram eigenvectors, eigenvalues lambda_i^2) and the u_i the right
    singular vectors, which realize u_i = (1/lambda_i) K^T v_i with far
    better roundoff behaviour near the rank cut than forming that product.

    The retained rank is the number of singular values with
    lambda_i / lambda_1 >= rank_tol.
    """
    if not 0 < rank_tol < 1:
        raise ValueError(f"rank_tol must lie in (0, 1), got {rank_tol}")
    v_left, lam, ut_right = np.linalg.svd(problem.kmatrix, full_matrices=False)
    if len(lam) == 0 or lam[0] <= 0:
        raise DegenerateProblemError("kernel matrix has no positive singular values")
    m = int(np.sum(lam / lam[0] >= rank_tol))
    if m == 0:
        raise DegenerateProblemError("all singular values fall below the rank tolerance")
    vectors = v_left[:, :m].copy()
    functions = ut_right[:m].T.copy()
    _fix_signs(vectors, functions)
    return SingularSystem(lambdas=lam[:m], vectors=vectors, functions=functions)


def expansion_coefficients(system: SingularSystem, data: DataSet) -> CoefficientSet:
    """Normal-solution coefficients b_i = (v_i, G~) / lambda_i.

    The uncertainty uses the conservative elementwise bound
    |(v_i, dG)| <= sum_k |v_ik| sigma_k, which is deterministic in the
    reported sigmas rather than in any particular noise draw.
    """
    if system.vectors.shape[0] != len(data):
        raise ValueError("singular system and data set have different lengths")
    b = (system.vectors.T @ data.values) / system.lambdas
    db = (np.abs(system.vectors).T @ data.sigmas) / system.lambdas
    return CoefficientSet(b=b, db=db)


def truncation_index(system: SingularSystem, data: DataSet) -> int:
    """Number of expansion terms kept by the noise-driven cut-off rule.

    Terms with lambda_i / lambda_1 below the mean relative data error
    (1/n) sum_i sigma_i / |G~_i| are dropped.  Data values that are exactly
    zero cannot contribute a relative error and are excluded from the mean
    with a warning.
    """
    values = data.values
    nonzero = values != 0.0
    if not np.any(nonzero):
        raise ValueError("cannot form a relative error: all data values are zero")
    if not np.all(nonzero):
        warnings.warn(
            f"{np.sum(~nonzero)} zero data value(s) excluded from the truncation rule",
            stacklevel=2,
        )
    threshold = float(np.mean(data.sigmas[nonzero] / np.abs(values[nonzero])))
    return int(np.sum(system.lambdas / system.lambdas[0] >= threshold))


def reconstruct(system: SingularSystem, coeffs: CoefficientSet, r_cut: int) -> np.ndarray:
    """Truncated expansion sum_{i <= r_cut} b_i u_i on the object grid."""
    if not 0 <= r_cut <= system.rank:
        raise ValueError(f"r_cut must lie in [0, {system.rank}], got {r_cut}")
    if len(coeffs.b) != system.rank:
        raise ValueError("coefficient set does not match the singular system rank")
    return system.functions[:, :r_cut] @ coeffs.b[:r_cut]


def solution_chi_squared(
    problem: DiscretizedProblem, system: SingularSystem, b: np.ndarray
) -> float:
    """Chi-squared of the expansion with coefficients ``b`` against the problem data."""
    fit = system.vectors @ (system.lambdas * b)
    r = (problem.data.values - fit) / problem.data.sigmas
    return inner_product_data(r, r)


def _penalized_lsq(rows, rhs, weights, targets, mus, lo, hi):
    """Box-constrained least squares of stacked cost and penalty rows."""
    a = np.vstack([rows] + [np.sqrt(mu) * w[None, :] for mu, w in zip(mus, weights)])
    y = np.concatenate([rhs] + [[np.sqrt(mu) * t] for mu, t in zip(mus, targets)])
    res = lsq_linear(a, y, bounds=(lo, hi), method="trf", tol=1e-14, max_iter=400)
    return res.x


def constrained_svd_solve(
    problem: DiscretizedProblem,
    system: SingularSystem,
    coeffs: CoefficientSet,
    constraints: list[IntegralConstraint] | tuple[IntegralConstraint, ...] | None = None,
    cost: str = "norm",
    tol_c: float | None = None,
    max_continuation: int = 8,
    continuation_factor: float = 10.0,
) -> np.ndarray:
    """Coefficient re-optimization under integral constraints.

    Minimizes the selected cost over coefficient sets inside the box
    b_i +/- db_i, subject to the discretized equality constraints
    sum_j g_l(x_j) dx A(x_j) = c_l.  ``cost`` is either ``"norm"`` (the
    solution norm, equal to ||b~|| by orthonormality of the u_i) or
    ``"chisq"`` (the sigma-weighted data misfit).

    The equalities are enforced by quadratic penalties with increasing
    weight; continuation stops once every residual |c_l - w_l @ A| is below
    ``tol_c`` (default 1e-6 |c_l| with an absolute floor of 1e-10) and fails
    with :class:`ConstraintInfeasibleError` after ``max_continuation`` steps.
    """
    constraints = list(problem.integral_constraints if constraints is None else constraints)
    if not constraints:
        raise ValueError("constrained solve needs at least one integral constraint")
    if cost not in ("norm", "chisq"):
        raise ValueError(f"cost must be 'norm' or 'chisq', got {cost!r}")

    m = system.rank
    # constraint rows in coefficient space: (w_l . u_i) b_i = c_l
    wrows = [c.weights(problem.grid) @ system.functions for c in constraints]
    targets = [c.c for c in constraints]

    def tol_for(c):
        base = 1e-6 * abs(c) if tol_c is None else tol_c
        return max(base, 1e-10)

    if cost == "norm":
        rows = np.eye(m)
        rhs = np.zeros(m)
    else:
        rows = system.vectors * system.lambdas[None, :] / problem.data.sigmas[:, None]
        rhs = problem.data.values / problem.data.sigmas

    lo = coeffs.b - coeffs.db
    hi = coeffs.b + coeffs.db

    def residuals(b):
        return np.array([abs(t - w @ b) for w, t in zip(wrows, targets)])

    if np.all(coeffs.db == 0):
        res = residuals(coeffs.b)
        if np.all([r <= tol_for(t) for r, t in zip(res, targets)]):
            return system.functions @ coeffs.b
        raise ConstraintInfeasibleError(
            f"zero-width coefficient box; best constraint residuals {res.tolist()}"
        )

    # penalty scale comparable to the cost curvature, then continuation;
    # residual feedback on the targets keeps the penalty weights moderate
    # (extreme weights would wreck the least-squares conditioning)
    scale = max(float(np.sum(rows * rows) / m), 1.0)
    mus = [scale / max(t * t, 1e-30) for t in targets]
    shifted = list(targets)
    b_sol = np.clip(coeffs.b, lo, hi)
    best = (np.inf, b_sol)
    for _ in range(max_continuation):
        b_sol = _penalized_lsq(rows, rhs, wrows, shifted, mus, lo, hi)
        res = residuals(b_sol)
        worst = max(res / np.array([tol_for(t) for t in targets]))
        if worst < best[0]:
            best = (worst, b_sol)
        if worst <= 1.0:
            return system.functions @ b_sol
        shifted = [s + (t - w @ b_sol) for s, t, w in zip(shifted, targets, wrows)]
        mus = [mu * continuation_factor for mu in mus]
    raise ConstraintInfeasibleError(
        f"constraints not met after {max_continuation} penalty continuations; "
        f"best residuals {residuals(best[1]).tolist()}"
    )
