"""Cached linear-algebra kernels around the constraint matrix A.

Everything downstream (variety geometry, dual recovery, the outer loop)
funnels its A-related work through a ConstraintFactors object so that the
Cholesky factor of AA^T is computed exactly once per problem.
"""

import numpy as np
import scipy.sparse as sp
from scipy.linalg import solve_triangular


class RankDeficient(Exception):
    """AA^T has a Cholesky pivot at or below threshold: A is not full row rank."""


class DimensionMismatch(Exception):
    """Operand shape incompatible with the stored constraint matrix."""


# store A sparse below this density, dense at or above it
_DENSE_CUTOFF = 0.25

# a pivot of the AA^T Cholesky below this multiple of the largest diagonal
# entry is treated as a rank deficiency
_PIVOT_RTOL = 1e-12


class ConstraintFactors:
    """Immutable bundle: A, the lower Cholesky factor of AA^T, and shapes.

    Safe to share across concurrent solves; all applicators are reentrant.
    """

    def __init__(self, a_matrix, chol_aat, m, n, nnz):
        self.a_matrix = a_matrix
        self.chol_aat = chol_aat
        self.m = m
        self.n = n
        self.nnz = nnz

    def a_apply(self, x):
        """A @ x."""
        if x.shape[0] != self.n:
            raise DimensionMismatch(f"expected {self.n} rows, got {x.shape[0]}")
        if self.m == 0:
            return np.zeros((0,) + x.shape[1:])
        return self.a_matrix @ x

    def at_apply(self, y):
        """A.T @ y."""
        if y.shape[0] != self.m:
            raise DimensionMismatch(f"expected {self.m} rows, got {y.shape[0]}")
        if self.m == 0:
            return np.zeros((self.n,) + y.shape[1:])
        return self.a_matrix.T @ y

    def aat_solve(self, x):
        """(AA^T)^{-1} x via two triangular solves against the cached factor."""
        if x.shape[0] != self.m:
            raise DimensionMismatch(f"expected {self.m} rows, got {x.shape[0]}")
        if self.m == 0:
            return np.zeros_like(x)
        z = solve_triangular(self.chol_aat, x, lower=True)
        return solve_triangular(self.chol_aat.T, z, lower=False)

    def half_solve(self, x):
        """L^{-1} x where AA^T = L L^T: whitens the row space."""
        if self.m == 0:
            return np.zeros_like(x)
        return solve_triangular(self.chol_aat, x, lower=True)


def factorize_constraints(a_matrix):
    """Factorize AA^T once and return the shared ConstraintFactors.

    a_matrix may be a dense array, a scipy sparse matrix, or None / empty
    (the unconstrained case m = 0). Raises RankDeficient when a Cholesky
    pivot falls below 1e-12 times the largest diagonal of AA^T.
    """
    if a_matrix is None:
        raise DimensionMismatch("a_matrix is None; pass an (0, n) array for m = 0")
    m, n = a_matrix.shape
    if m == 0:
        return ConstraintFactors(np.zeros((0, n)), np.zeros((0, 0)), 0, n, 0)
    if m > n:
        raise RankDeficient(f"m = {m} rows exceed n = {n} columns")

    if sp.issparse(a_matrix):
        nnz = a_matrix.nnz
        density = nnz / (m * n)
        if density > _DENSE_CUTOFF:
            a_matrix = np.asarray(a_matrix.todense())
        else:
            a_matrix = a_matrix.tocsr()
    else:
        a_matrix = np.ascontiguousarray(a_matrix, dtype=float)
        nnz = int(np.count_nonzero(a_matrix))
        density = nnz / (m * n)
        if density <= _DENSE_CUTOFF:
            a_matrix = sp.csr_matrix(a_matrix)

    aat = a_matrix @ a_matrix.T
    if sp.issparse(aat):
        aat = np.asarray(aat.todense())
    aat = np.asarray(aat, dtype=float)
    maxdiag = float(np.max(np.diag(aat)))
    if maxdiag <= 0.0:
        raise RankDeficient("AA^T has a nonpositive diagonal")
    try:
        chol = np.linalg.cholesky(aat)
    except np.linalg.LinAlgError as exc:
        raise RankDeficient(f"AA^T Cholesky failed: {exc}") from exc
    pivots = np.diag(chol) ** 2
    if np.min(pivots) <= _PIVOT_RTOL * maxdiag:
        raise RankDeficient(
            f"smallest Cholesky pivot {np.min(pivots):.3e} below "
            f"{_PIVOT_RTOL:.0e} * maxdiag {maxdiag:.3e}"
        )
    return ConstraintFactors(a_matrix, chol, m, n, nnz)


def pinv_apply(factors, x):
    """A^dagger x = A^T (AA^T)^{-1} x, applied without forming any inverse."""
    x = np.asarray(x, dtype=float)
    if x.shape[0] != factors.m:
        raise DimensionMismatch(f"expected {factors.m} rows, got {x.shape[0]}")
    if factors.m == 0:
        return np.zeros((factors.n,) + x.shape[1:])
    return factors.at_apply(factors.aat_solve(x))


def ja_apply(factors, x):
    """J_A x = (I - A^dagger A) x: orthogonal projection onto null(A)."""
    x = np.asarray(x, dtype=float)
    if x.shape[0] != factors.n:
        raise DimensionMismatch(f"expected {factors.n} rows, got {x.shape[0]}")
    if factors.m == 0:
        return x.copy()
    return x - pinv_apply(factors, factors.a_apply(x))
