"""Geometry of the feasible factor variety.

Points are n x r factors R with A R = b e1' and, for every binary row i,
||R_i||^2 = R_i[0] (equivalently the shifted row R'_i = (2R - e e1')_i has
unit norm). Tangent spaces, least-squares normal systems, and the metric
retraction (alternating reweighting plus a Newton finish) live here.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .linops import ja_apply, pinv_apply

FEAS_TOL = 1e-9

# iterative reweighting controls for the metric projection
_WEISZFELD_MAX = 500
_WEISZFELD_GTOL = 1e-10
_NEWTON_SWITCH = 1e-4
_ANCHOR_EPS = 1e-14
_NEWTON_SIZE_CAP = 3000


class InitFailed(Exception):
    """No feasible starting factor found within the retry budget."""


class SingularSystem(Exception):
    """Normal-system matrix numerically singular at this point."""


class RetractionFailed(Exception):
    """Projection back to the variety stalled or the step was oversized."""


class AnchorDegenerate(Exception):
    """A shifted binary row has norm ~ 0; the anchor map is undefined."""


class MaxIterations(Exception):
    """Reweighting loop hit its iteration cap before the gradient test."""


@dataclass
class FactorPoint:
    """Feasible factor with cached shifted rows R' = 2R - e e1'."""

    model: object
    r_matrix: np.ndarray
    _rprime: np.ndarray = field(default=None, repr=False)

    @property
    def rank(self):
        return self.r_matrix.shape[1]

    @property
    def n(self):
        return self.r_matrix.shape[0]

    def rprime(self):
        if self._rprime is None:
            rp = 2.0 * self.r_matrix
            rp[:, 0] -= 1.0
            self._rprime = rp
        return self._rprime

    def first_col(self):
        return self.r_matrix[:, 0]

    def residuals(self):
        """(relative affine residual, max sphere-row deviation)."""
        model = self.model
        aff = 0.0
        if model.m:
            gap = model.factors.a_apply(self.r_matrix)
            gap[:, 0] -= model.problem.b_vec
            aff = float(np.linalg.norm(gap)) / model.rhs_norm
        sph = 0.0
        bset = model.binary_set
        if bset.size:
            g = np.einsum("ij,ij->i", self.rprime()[bset], self.rprime()[bset])
            sph = float(np.max(np.abs(np.sqrt(g) - 1.0)))
        return aff, sph

    def is_feasible(self, tol=FEAS_TOL):
        aff, sph = self.residuals()
        return aff <= tol and sph <= tol


@dataclass
class TangentVector:
    """Tangent direction H at `point` (A H = 0, shifted rows orthogonal),
    carrying the least-squares multipliers of the projection that made it."""

    point: FactorPoint
    h_matrix: np.ndarray
    lam: np.ndarray = None
    mu: np.ndarray = None

    @property
    def norm(self):
        return float(np.linalg.norm(self.h_matrix))


def h_apply(point, v):
    """Constraint linearization: (A V, rows_B <V_i, R'_i>)."""
    model = point.model
    top = model.factors.a_apply(v) if model.m else np.zeros((0, v.shape[1]))
    bset = model.binary_set
    if bset.size:
        bot = np.einsum("ij,ij->i", v[bset], point.rprime()[bset])
    else:
        bot = np.zeros(0)
    return top, bot


def h_star_apply(point, lam, mu):
    """Adjoint of h_apply: A' lam + rows_B scaled by mu."""
    model = point.model
    out = model.factors.at_apply(lam) if model.m else np.zeros_like(point.r_matrix)
    bset = model.binary_set
    if bset.size:
        out[bset] += mu[:, None] * point.rprime()[bset]
    return out


def _j_bb(model):
    """(I - A^dagger A) restricted to the binary rows/cols, cached."""
    cached = getattr(model, "_j_bb_cache", None)
    if cached is not None:
        return cached
    bset = model.binary_set
    cols = np.zeros((model.n, bset.size))
    cols[bset, np.arange(bset.size)] = 1.0
    jbb = ja_apply(model.factors, cols)[bset]
    model._j_bb_cache = jbb
    return jbb


def solve_normal_system(point, rhs1, rhs2):
    """Solve h(h*(lam, mu)) = (rhs1, rhs2) for the multipliers.

    Eliminates lam through the AA' factor; the reduced binary-row system is
    solved densely when small, otherwise through a low-rank update of its
    diagonal (the crossover follows the (m r)^3 + (m r)^2 |B| vs |B|^3
    cost estimate). Raises SingularSystem when the reduced matrix loses
    positive definiteness or the residual check fails.
    """
    model = point.model
    factors = model.factors
    m = model.m
    bset = model.binary_set
    nb = bset.size
    r = point.rank
    rp_b = point.rprime()[bset]
    g = np.einsum("ij,ij->i", rp_b, rp_b)

    if m == 0:
        if np.any(g < _ANCHOR_EPS):
            raise SingularSystem("sphere row with vanishing shifted norm")
        return np.zeros((0, r)), rhs2 / g

    if nb == 0:
        lam = factors.aat_solve(rhs1)
        return lam, np.zeros(0)

    t = pinv_apply(factors, rhs1)
    rhs2_red = rhs2 - np.einsum("ij,ij->i", t[bset], rp_b)

    use_smw = (m * r) ** 3 + (m * r) ** 2 * nb < nb ** 3
    if use_smw:
        if np.any(g < _ANCHOR_EPS):
            raise SingularSystem("sphere row with vanishing shifted norm")
        a_b = factors.a_matrix[:, bset]
        if sp.issparse(a_b):
            a_b = np.asarray(a_b.todense())
        k_half = factors.half_solve(a_b)          # m x nb
        u = (k_half[:, None, :] * rp_b.T[None, :, :]).reshape(m * r, nb)
        y = rhs2_red / g
        core = np.eye(m * r) - (u / g) @ u.T
        try:
            cf = np.linalg.cholesky(core)
        except np.linalg.LinAlgError as exc:
            raise SingularSystem(f"low-rank core not positive definite: {exc}") from exc
        w = np.linalg.solve(cf, u @ y)
        w = np.linalg.solve(cf.T, w)
        mu = y + (u.T @ w) / g
    else:
        m_mat = _j_bb(model) * (rp_b @ rp_b.T)
        try:
            cf = np.linalg.cholesky(m_mat)
        except np.linalg.LinAlgError as exc:
            raise SingularSystem(f"reduced system not positive definite: {exc}") from exc
        mu = np.linalg.solve(cf.T, np.linalg.solve(cf, rhs2_red))

    corr = np.zeros((model.n, r))
    corr[bset] = mu[:, None] * rp_b
    lam = factors.aat_solve(rhs1 - factors.a_apply(corr))

    # one refinement pass, then verify
    got1, got2 = h_apply(point, h_star_apply(point, lam, mu))
    res1, res2 = rhs1 - got1, rhs2 - got2
    scale = 1.0 + max(np.linalg.norm(rhs1), np.linalg.norm(rhs2))
    if max(np.linalg.norm(res1), np.linalg.norm(res2)) > 1e-11 * scale:
        dlam, dmu = solve_normal_system_once(point, res1, res2, g, cf, use_smw, u if use_smw else None)
        lam = lam + dlam
        mu = mu + dmu
        res1b, res2b = h_apply(point, h_star_apply(point, lam, mu))
        err = max(np.linalg.norm(rhs1 - res1b), np.linalg.norm(rhs2 - res2b))
        if err > 1e-9 * scale:
            raise SingularSystem(f"normal system residual {err:.2e} above tolerance")
    return lam, mu


def solve_normal_system_once(point, rhs1, rhs2, g, cf, use_smw, u):
    """Single back-substitution reusing the factor from the main solve."""
    model = point.model
    factors = model.factors
    bset = model.binary_set
    rp_b = point.rprime()[bset]
    t = pinv_apply(factors, rhs1)
    rhs2_red = rhs2 - np.einsum("ij,ij->i", t[bset], rp_b)
    if use_smw:
        y = rhs2_red / g
        w = np.linalg.solve(cf, u @ y)
        w = np.linalg.solve(cf.T, w)
        mu = y + (u.T @ w) / g
    else:
        mu = np.linalg.solve(cf.T, np.linalg.solve(cf, rhs2_red))
    corr = np.zeros((model.n, point.rank))
    corr[bset] = mu[:, None] * rp_b
    lam = factors.aat_solve(rhs1 - factors.a_apply(corr))
    return lam, mu


def tangent_project(point, v):
    """Orthogonal projection of an ambient matrix onto the tangent space."""
    rhs1, rhs2 = h_apply(point, v)
    lam, mu = solve_normal_system(point, rhs1, rhs2)
    h = v - h_star_apply(point, lam, mu)
    return TangentVector(point=point, h_matrix=h, lam=lam, mu=mu)


# ---------------------------------------------------------------------------
# Retraction: metric projection back onto the variety


def _anchor_project(model, v, rows=None):
    """Row-wise anchor normalization: binary rows of the shifted matrix are
    rescaled to unit norm, all other rows pass through."""
    bset = model.binary_set if rows is None else rows
    out = v.copy()
    if bset.size == 0:
        return out
    vp = 2.0 * v[bset]
    vp[:, 0] -= 1.0
    norms = np.linalg.norm(vp, axis=1)
    if np.any(norms < _ANCHOR_EPS):
        raise AnchorDegenerate("shifted row norm below 1e-14")
    vp /= norms[:, None]
    vp[:, 0] += 1.0
    out[bset] = 0.5 * vp
    return out


def _reweight_matrix(a, v):
    """A diag(v) A' as a dense m x m array."""
    if sp.issparse(a):
        return np.asarray((a.multiply(v) @ a.T).todense())
    return (a * v) @ a.T


def weiszfeld_solve(model, v, gtol_scale=None, max_iter=_WEISZFELD_MAX,
                    return_history=False):
    """Multiplier matrix Theta for the metric projection onto the variety.

    Minimizes the dual function G(Theta) = sum_B ||w_i|| + sum_notB
    ||w_i||^2 + <b1, A'Theta> with w = V1 + A'Theta, V1 = V - e e1'/2 and
    A b1 = (A e - 2 b) e1'. Alternates exact reweighted least-squares
    steps (G never increases) and switches to a damped Newton finish once
    steps stagnate. Degenerate anchor rows are nudged with a tiny fixed
    perturbation. Raises MaxIterations past the cap.
    """
    factors = model.factors
    a = factors.a_matrix
    m, n = factors.m, factors.n
    r = v.shape[1]
    bset = model.binary_set
    in_b = np.zeros(n, dtype=bool)
    in_b[bset] = True

    v1 = v.copy()
    v1[:, 0] -= 0.5
    ae = factors.a_apply(np.ones(n))
    b1 = np.zeros((n, r))
    b1[:, 0] = pinv_apply(factors, ae - 2.0 * model.problem.b_vec)
    gtol = _WEISZFELD_GTOL * (1.0 + np.linalg.norm(v)) if gtol_scale is None else gtol_scale
    perturb_rng = np.random.Generator(np.random.Philox(0x5EED))

    def g_value(w):
        nb_norm = np.linalg.norm(w[bset], axis=1).sum() if bset.size else 0.0
        rest = float(np.einsum("ij,ij->", w[~in_b], w[~in_b]))
        return nb_norm + rest + float(np.einsum("ij,ij->", b1, factors.at_apply(theta)))

    theta = np.zeros((m, r))
    history = []
    newton_mode = False
    for it in range(max_iter):
        w = v1 + factors.at_apply(theta)
        norms = np.linalg.norm(w[bset], axis=1) if bset.size else np.zeros(0)
        while np.any(norms < _ANCHOR_EPS):
            theta = theta + 1e-10 * perturb_rng.standard_normal(theta.shape)
            w = v1 + factors.at_apply(theta)
            norms = np.linalg.norm(w[bset], axis=1)
        weights = np.full(n, 2.0)
        weights[bset] = 1.0 / norms
        grad = factors.a_apply(b1 + weights[:, None] * w)
        gnorm = float(np.linalg.norm(grad))
        if return_history:
            history.append(g_value(w))
        if gnorm <= gtol:
            return (theta, history) if return_history else theta

        if newton_mode and m * r <= _NEWTON_SIZE_CAP:
            step = _newton_step(a, w, norms, bset, in_b, grad, m, r)
            if step is not None:
                cand = theta + step
                wc = v1 + factors.at_apply(cand)
                ok = True
                if bset.size and np.any(np.linalg.norm(wc[bset], axis=1) < _ANCHOR_EPS):
                    ok = False
                if ok and _g_of(wc, bset, in_b, b1, factors, cand) <= _g_of(
                        w, bset, in_b, b1, factors, theta):
                    theta = cand
                    continue
            newton_mode = False  # fall back to reweighting

        lhs = _reweight_matrix(a, weights)
        rhs = -factors.a_apply(b1 + weights[:, None] * v1)
        try:
            new_theta = np.linalg.solve(lhs, rhs)
        except np.linalg.LinAlgError as exc:
            raise SingularSystem(f"reweighted system singular: {exc}") from exc
        step_sz = float(np.linalg.norm(new_theta - theta))
        theta = new_theta
        if step_sz <= _NEWTON_SWITCH * (1.0 + float(np.linalg.norm(theta))):
            newton_mode = True
    raise MaxIterations(f"no convergence in {max_iter} reweighting steps")


def _g_of(w, bset, in_b, b1, factors, theta):
    nb_norm = np.linalg.norm(w[bset], axis=1).sum() if bset.size else 0.0
    rest = float(np.einsum("ij,ij->", w[~in_b], w[~in_b]))
    return nb_norm + rest + float(np.einsum("ij,ij->", b1, factors.at_apply(theta)))


def _newton_step(a, w, norms, bset, in_b, grad, m, r):
    """Damped Newton direction for the dual function; None when the dense
    Hessian would be oversized or loses definiteness."""
    if m * r > _NEWTON_SIZE_CAP:
        return None
    a_dense = np.asarray(a.todense()) if sp.issparse(a) else a
    a_nb = a_dense[:, ~in_b]
    base = 2.0 * (a_nb @ a_nb.T)
    hess = np.kron(np.eye(r), base)
    if bset.size:
        a_b = a_dense[:, bset]
        inv = 1.0 / norms
        hess += np.kron(np.eye(r), (a_b * inv) @ a_b.T)
        # subtract sum_i (1/||w_i||) (what_i what_i') x (a_i a_i')
        what = w[bset] * inv[:, None]
        scaled = what * np.sqrt(inv)[:, None]
        cross = np.einsum("is,ui->sui", scaled, a_b).reshape(m * r, bset.size)
        hess -= cross @ cross.T
    hess[np.diag_indices_from(hess)] += 1e-12 * max(np.abs(hess).max(), 1.0)
    try:
        cf = np.linalg.cholesky(hess)
    except np.linalg.LinAlgError:
        return None
    gvec = grad.reshape(m * r, order="F")
    step = np.linalg.solve(cf.T, np.linalg.solve(cf, -gvec))
    return step.reshape(m, r, order="F")


def project_to_variety(model, v):
    """Metric projection of an ambient n x r matrix onto the variety."""
    if model.m == 0:
        return FactorPoint(model, _anchor_project(model, v))
    if model.binary_set.size == 0:
        gap = model.factors.a_apply(v)
        gap[:, 0] -= model.problem.b_vec
        return FactorPoint(model, v - pinv_apply(model.factors, gap))
    try:
        theta = weiszfeld_solve(model, v)
    except (MaxIterations, SingularSystem) as exc:
        raise RetractionFailed(str(exc)) from exc
    point = FactorPoint(model, _anchor_project(model, v + model.factors.at_apply(theta)))
    aff, sph = point.residuals()
    if max(aff, sph) > FEAS_TOL:
        raise RetractionFailed(f"projected point infeasible: aff {aff:.2e} sph {sph:.2e}")
    return point


def retract(point, h):
    """First-order retraction: metric projection of R + H.

    H may be a TangentVector or a raw array. Steps larger than twice the
    base norm are refused (RetractionFailed) before any projection work.
    """
    hm = h.h_matrix if isinstance(h, TangentVector) else h
    hn = float(np.linalg.norm(hm))
    rn = float(np.linalg.norm(point.r_matrix))
    if hn > 2.0 * max(rn, 1.0):
        raise RetractionFailed(f"step norm {hn:.2e} exceeds cap {2 * max(rn, 1.0):.2e}")
    return project_to_variety(point.model, point.r_matrix + hm)


def feasible_init(model, r, seed):
    """Deterministic feasible starting factor.

    With no equality rows the binary rows are drawn uniformly on the
    shifted sphere; with no binary rows the draw is the exact affine
    projection of a Gaussian; otherwise a Gaussian seeded at the affine
    particular solution is projected, retrying up to 10 fresh draws.
    """
    n = model.n
    rng = np.random.Generator(np.random.Philox(seed))
    if model.m == 0:
        raw = rng.standard_normal((n, r))
        free = np.ones(n, dtype=bool)
        free[model.binary_set] = False
        raw[free] /= np.sqrt(r)
        return FactorPoint(model, _anchor_project(model, raw))
    base = np.zeros((n, r))
    base[:, 0] = pinv_apply(model.factors, model.problem.b_vec)
    if model.binary_set.size == 0:
        g = ja_apply(model.factors, rng.standard_normal((n, r)) / np.sqrt(r))
        return FactorPoint(model, base + g)
    for _ in range(10):
        g = ja_apply(model.factors, rng.standard_normal((n, r)))
        v = base + g
        v *= np.sqrt(n) / np.linalg.norm(v)
        try:
            point = project_to_variety(model, v)
        except (RetractionFailed, AnchorDegenerate, SingularSystem):
            continue
        if point.is_feasible():
            return point
    raise InitFailed(f"no feasible start after 10 draws (seed {seed})")


# ---------------------------------------------------------------------------
# Diagnostics


@dataclass
class RegularityReport:
    sigma_min: float
    cond: float
    system_dim: int


def unreduced_adjoint(point, lam1, lam2, mu):
    """Adjoint of the unreduced constraint system (equality rows applied to
    both the first column and the full Gram block). The combination
    (b, -A, 0) lands in its kernel at every feasible point, which is the
    structural rank deficiency that motivates the reduced variety."""
    model = point.model
    out = np.zeros_like(point.r_matrix)
    if model.m:
        out += np.outer(model.factors.at_apply(lam1), _e1(point.rank))
        out += model.factors.at_apply(lam2 @ point.r_matrix)
    bset = model.binary_set
    if bset.size and mu is not None and len(mu):
        out[bset] += mu[:, None] * point.rprime()[bset]
    return out


def _e1(r):
    e = np.zeros(r)
    e[0] = 1.0
    return e


def regularity_check(point, dense_cap=4000):
    """Smallest eigenvalue and condition number of h h* at the point.

    Assembled densely when m r + |B| is small; larger systems fall back to
    Lanczos bounds. A condition number of 1 is reported for the
    unconstrained-rows case (the system is the identity at feasibility)."""
    model = point.model
    m, r = model.m, point.rank
    bset = model.binary_set
    nb = bset.size
    dim = m * r + nb
    if dim == 0:
        return RegularityReport(1.0, 1.0, 0)
    rp_b = point.rprime()[bset]
    g = np.einsum("ij,ij->i", rp_b, rp_b) if nb else np.zeros(0)
    if m == 0:
        smin = float(np.min(g))
        smax = float(np.max(g))
        return RegularityReport(smin, smax / max(smin, 1e-300), dim)
    if dim <= dense_cap:
        a = model.factors.a_matrix
        a_dense = np.asarray(a.todense()) if sp.issparse(a) else a
        aat = a_dense @ a_dense.T
        full = np.zeros((dim, dim))
        for s in range(r):
            full[s * m:(s + 1) * m, s * m:(s + 1) * m] = aat
        if nb:
            a_b = a_dense[:, bset]
            e2 = np.einsum("ui,is->sui", a_b, rp_b).reshape(m * r, nb)
            full[:m * r, m * r:] = e2
            full[m * r:, :m * r] = e2.T
            full[m * r:, m * r:] = np.diag(g)
        evals = np.linalg.eigvalsh(full)
        smin = float(evals[0])
        smax = float(evals[-1])
        return RegularityReport(smin, smax / max(smin, 1e-300), dim)
    from scipy.sparse.linalg import LinearOperator, eigsh

    def mv(x):
        lam = x[:m * r].reshape(m, r, order="F")
        mu = x[m * r:]
        t1, t2 = h_apply(point, h_star_apply(point, lam, mu))
        return np.concatenate([t1.reshape(m * r, order="F"), t2])

    op = LinearOperator((dim, dim), matvec=mv)
    v0 = np.ones(dim) / np.sqrt(dim)
    try:
        smax = float(eigsh(op, k=1, which="LA", maxiter=500, v0=v0,
                           return_eigenvectors=False)[0])
        smin = float(eigsh(op, k=1, which="SA", maxiter=2000, v0=v0,
                           return_eigenvectors=False)[0])
    except Exception:
        return RegularityReport(float("nan"), float("inf"), dim)
    return RegularityReport(smin, smax / max(smin, 1e-300), dim)
