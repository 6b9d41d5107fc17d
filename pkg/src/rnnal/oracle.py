"""Slow, independent reference solvers used to cross-check the main path.

Nothing here shares geometry or projection code with the production
solver: the affine constraints are materialized as a dense matrix over
vec(Y), the PSD projection is a full eigendecomposition, and the sign
cone is re-implemented inline. Intentionally simple, deliberately O(n^6).
"""

from dataclasses import dataclass

import numpy as np
from scipy.linalg import eigh, pinvh


class TooLarge(Exception):
    """Instance exceeds the oracle's hard size cap."""


class Infeasible(Exception):
    """Exhaustive enumeration found no feasible binary point."""


class NoConvergence(Exception):
    """Splitting method failed to reach tolerance within the iteration cap."""


_DNN_CAP = 80
_BRUTE_CAP = 22


def _constraint_rows(model):
    """Dense K x (n+1)^2 matrix of symmetric constraint forms plus rhs d."""
    prob = model.problem
    n, m = prob.n, prob.m
    dim = n + 1
    a = prob.a_matrix
    if hasattr(a, "todense"):
        a = np.asarray(a.todense())
    b = prob.b_vec
    bset = prob.binary_set
    rows = []
    rhs = []
    for i in range(m):
        mat = np.zeros((dim, dim))
        mat[1:, 0] = a[i] / 2.0
        mat[0, 1:] = a[i] / 2.0
        rows.append(mat.ravel())
        rhs.append(b[i])
    for i in range(m):
        for t in range(n):
            mat = np.zeros((dim, dim))
            mat[1:, t + 1] += a[i] / 2.0
            mat[t + 1, 1:] += a[i] / 2.0
            mat[0, t + 1] -= b[i] / 2.0
            mat[t + 1, 0] -= b[i] / 2.0
            rows.append(mat.ravel())
            rhs.append(0.0)
    for i in bset:
        mat = np.zeros((dim, dim))
        mat[i + 1, i + 1] = 1.0
        mat[i + 1, 0] = -0.5
        mat[0, i + 1] = -0.5
        rows.append(mat.ravel())
        rhs.append(0.0)
    mat = np.zeros((dim, dim))
    mat[0, 0] = 1.0
    rows.append(mat.ravel())
    rhs.append(1.0)
    return np.array(rows), np.array(rhs)


@dataclass
class OracleResult:
    y_matrix: np.ndarray
    objective: float
    iterations: int
    residual: float


def dense_dnn_solve(model, tol=1e-7, max_iter=200_000):
    """Reference DNN value by three-way consensus splitting.

    One copy per structure: affine rows (with the linear cost attached),
    the PSD cone (full eigendecomposition each sweep), and the entrywise
    cone. Deterministic; n is capped at 80 because every sweep costs a
    dense eigendecomposition of the lifted matrix.
    """
    n = model.n
    if n > _DNN_CAP:
        raise TooLarge(f"n = {n} exceeds oracle cap {_DNN_CAP}")
    dim = model.dim
    amat, d = _constraint_rows(model)
    gram_inv = pinvh(amat @ amat.T)

    cost = model.cost_c
    if hasattr(cost, "todense"):
        cost = np.asarray(cost.todense())
    cvec = cost.ravel()
    # Work with a unit-scale cost: same minimizer, and the splitting
    # iterates stay at the scale of Y instead of the scale of C.
    cost_scale = max(1.0, float(np.linalg.norm(cvec)))
    cs_vec = cvec / cost_scale

    pat_rows = np.zeros((dim, dim), dtype=bool)
    for i, j in model.problem.incompat_set:
        pat_rows[i + 1, j + 1] = True
        pat_rows[j + 1, i + 1] = True
    pat = pat_rows.ravel()

    def proj_affine(y):
        resid = amat @ y - d
        return y - amat.T @ (gram_inv @ resid)

    def proj_psd(y):
        s = y.reshape(dim, dim)
        s = 0.5 * (s + s.T)
        w, v = eigh(s)
        w = np.maximum(w, 0.0)
        return ((v * w) @ v.T).ravel()

    def proj_sign(y):
        out = np.maximum(y, 0.0)
        out[pat] = 0.0
        return out

    z = np.zeros(dim * dim)
    z[0] = 1.0
    u1 = np.zeros_like(z)
    u2 = np.zeros_like(z)
    u3 = np.zeros_like(z)
    rho = 1.0
    it = 0
    rel = np.inf
    # Penalty rebalancing is frozen after a warmup window; endless
    # adaptation on hard instances cycles instead of converging.
    adapt_until = min(2000, max_iter // 4)
    for it in range(1, max_iter + 1):
        x1 = proj_affine(z - u1 - cs_vec / rho)
        x2 = proj_psd(z - u2)
        x3 = proj_sign(z - u3)
        z_new = (x1 + u1 + x2 + u2 + x3 + u3) / 3.0
        r_dual = rho * np.sqrt(3.0) * np.linalg.norm(z_new - z)
        z = z_new
        u1 += x1 - z
        u2 += x2 - z
        u3 += x3 - z
        r_pri = np.sqrt(
            np.linalg.norm(x1 - z) ** 2
            + np.linalg.norm(x2 - z) ** 2
            + np.linalg.norm(x3 - z) ** 2)
        scale = 1.0 + np.linalg.norm(z)
        rel = max(r_pri / scale, r_dual / scale)
        if rel <= tol:
            break
        if it <= adapt_until and it % 10 == 0:
            if r_pri > 10.0 * r_dual:
                rho *= 2.0
                u1 /= 2.0
                u2 /= 2.0
                u3 /= 2.0
            elif r_dual > 10.0 * r_pri:
                rho /= 2.0
                u1 *= 2.0
                u2 *= 2.0
                u3 *= 2.0
    else:
        raise NoConvergence(f"residual {rel:.3e} > tol {tol:.1e} after {max_iter} sweeps")
    y = z.reshape(dim, dim)
    y = 0.5 * (y + y.T)
    return OracleResult(
        y_matrix=y, objective=float(cvec @ z), iterations=it, residual=float(rel))


def brute_force_mbqp(prob, chunk=1 << 16):
    """Exact optimum of a pure-binary instance by exhaustive enumeration.

    Requires binary_set = {0..n-1} and n <= 22. Equality rows are checked
    to 1e-9; pairwise exclusions are enforced exactly. Returns
    (best_value, best_x); raises Infeasible when nothing passes.
    """
    n = prob.n
    if n > _BRUTE_CAP:
        raise TooLarge(f"n = {n} exceeds enumeration cap {_BRUTE_CAP}")
    if prob.binary_set.size != n:
        raise TooLarge("enumeration requires a pure-binary instance")
    q = prob.q_matrix
    if hasattr(q, "todense"):
        q = np.asarray(q.todense())
    a = prob.a_matrix
    if hasattr(a, "todense"):
        a = np.asarray(a.todense())
    c = prob.c_vec
    pairs = np.array(prob.incompat_set, dtype=np.intp).reshape(-1, 2)
    best_val = np.inf
    best_x = None
    total = 1 << n
    bits = np.arange(n, dtype=np.uint64)
    for lo in range(0, total, chunk):
        codes = np.arange(lo, min(lo + chunk, total), dtype=np.uint64)
        x = ((codes[:, None] >> bits) & 1).astype(float)
        ok = np.ones(len(codes), dtype=bool)
        if prob.m:
            ok &= np.all(np.abs(x @ a.T - prob.b_vec) <= 1e-9, axis=1)
        if len(pairs):
            ok &= ~np.any(x[:, pairs[:, 0]] * x[:, pairs[:, 1]] > 0, axis=1)
        if not ok.any():
            continue
        xs = x[ok]
        vals = np.einsum("ij,jk,ik->i", xs, q, xs) + 2.0 * xs @ c
        k = int(np.argmin(vals))
        if vals[k] < best_val:
            best_val = float(vals[k])
            best_x = xs[k].copy()
    if best_x is None:
        raise Infeasible("no binary point satisfies the constraints")
    return best_val, best_x
