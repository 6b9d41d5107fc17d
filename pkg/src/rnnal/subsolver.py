"""Inner solver: first-order descent of the penalized objective over the
feasible factor variety.

The per-(multiplier, penalty) state lives in a SubproblemContext so the
objective and gradient share one projected-residual materialization per
iterate, and any change of the outer state invalidates the cache via a
version stamp instead of silently reusing stale buffers.
"""

import time
from collections import deque

import numpy as np
import scipy.sparse as sp

from .variety import (RetractionFailed, tangent_project, retract)

_ARMIJO_C = 1e-4
_BACKTRACK = 0.5
_STEP_FLOOR = 1e-16
_BB_MIN, _BB_MAX = 1e-10, 1e10
_WINDOW = 5
_STALL_ITERS = 100


class StaleCache(Exception):
    """Gradient requested for a point the objective was never evaluated at
    (or the outer state moved underneath the cache)."""


class LineSearchFailed(Exception):
    """Backtracking drove the step below 1e-16 without sufficient decrease."""


class SubproblemContext:
    """Holds the multiplier matrix, the penalty, and the work buffers.

    The full (n+1)^2 work buffer stores sigma^{-1} W~ - Y(R) and is
    overwritten in place by the dual-cone projection, after which it holds
    the current multiplier surrogate W(R) / sigma. One extra n^2 scratch
    block backs the Gram product and the contiguous gradient matmul.
    """

    def __init__(self, model, w_tilde, sigma):
        self.model = model
        self.w_tilde = w_tilde
        self.sigma = float(sigma)
        dim = model.dim
        self._t = np.empty((dim, dim))
        self._xx = np.empty((dim - 1, dim - 1))
        self.version = 0
        self._stamp = None
        self._cw_version = -1
        self._cw = 0.0
        cost = model.cost_c
        coo = cost.tocoo() if sp.issparse(cost) else None
        if coo is not None:
            self._cost_flat = (coo.row.astype(np.intp) * dim + coo.col).astype(np.intp)
            self._cost_vals = coo.data.copy()
            self._c22 = cost.tocsr()[1:, 1:]
        else:
            self._cost_flat = None
            self._c22 = cost[1:, 1:]
        self._c21 = model.problem.c_vec

    def set_state(self, sigma=None):
        """Signal that w_tilde contents or sigma changed."""
        if sigma is not None:
            self.sigma = float(sigma)
        self.version += 1
        self._stamp = None

    def _cost_dot(self, mat):
        if self._cost_flat is not None:
            return float(self._cost_vals @ mat.ravel()[self._cost_flat])
        return float(np.einsum("ij,ij->", self.model.cost_c, mat))

    def cost_dot_wtilde(self):
        if self._cw_version != self.version:
            self._cw = self._cost_dot(self.w_tilde)
            self._cw_version = self.version
        return self._cw

    def eval_objective(self, point):
        """Penalized objective at the point; primes the gradient cache."""
        from .cones import proj_pstar

        if self._stamp == (id(point), self.version):
            return self._f
        sigma = self.sigma
        r_mat = point.r_matrix
        x = r_mat[:, 0]
        t = self._t
        np.multiply(self.w_tilde, 1.0 / sigma, out=t)
        np.matmul(r_mat, r_mat.T, out=self._xx)
        t[1:, 1:] -= self._xx
        t[0, 0] -= 1.0
        t[1:, 0] -= x
        t[0, 1:] -= x
        cost_y = self.cost_dot_wtilde() / sigma - self._cost_dot(t)
        proj_pstar(t, self.model.zero_pattern, out=t)
        flat = t.ravel()
        penalty = float(flat @ flat)
        f = cost_y + 0.5 * sigma * penalty
        self._stamp = (id(point), self.version)
        self._f = f
        self._cost_y = cost_y
        return f

    def eval_egrad(self, point):
        """Ambient gradient 2[(C-W)_21 e1' + (C-W)_22 R]; requires the
        objective cache to be primed at exactly this point."""
        if self._stamp != (id(point), self.version):
            raise StaleCache("objective not evaluated at this point/state")
        sigma = self.sigma
        r_mat = point.r_matrix
        t = self._t
        np.copyto(self._xx, t[1:, 1:])
        grad = self._c22 @ r_mat
        grad -= sigma * (self._xx @ r_mat)
        grad *= 2.0
        grad[:, 0] += 2.0 * (self._c21 - sigma * t[1:, 0])
        return grad

    def proj_snapshot(self, out=None):
        """Copy of the projected-residual buffer at the cached point."""
        if self._stamp is None:
            raise StaleCache("no cached evaluation")
        if out is None:
            return self._t.copy()
        np.copyto(out, self._t)
        return out

    def eval_delta(self, point, cand, proj_prev):
        """f(cand) - f(point) without differencing the two objectives, so
        the result stays meaningful when the gap sits far below the rounding
        level of f itself.  proj_prev must be a snapshot taken at `point`;
        the cache ends up primed at `cand`.

        The cost term telescopes through Y(cand) - Y(point) = RD' + DR' + DD'
        with D the factor displacement, and the penalty difference is summed
        as (a - b)(a + b) elementwise, which is exact where the projections
        agree. Error is ~eps * ||D||, not eps * |f|.
        """
        self.eval_objective(cand)
        d = cand.r_matrix - point.r_matrix
        cr = self._c22 @ point.r_matrix
        cd = self._c22 @ d
        lin = 2.0 * float(np.einsum("ij,ij->", cr, d))
        lin += float(np.einsum("ij,ij->", cd, d))
        lin += 2.0 * float(self._c21 @ d[:, 0])
        dt = self._t - proj_prev
        st = self._t + proj_prev
        pen = float(dt.ravel() @ st.ravel())
        return lin + 0.5 * self.sigma * pen

    def w_blocks(self):
        """Raw blocks (t00, t21, t22 view, sigma) of the projected residual
        at the cached point; the multiplier surrogate is W = sigma * t.
        t22 is a view into the work buffer: copy before mutating."""
        if self._stamp is None:
            raise StaleCache("no cached evaluation")
        t = self._t
        return t[0, 0], t[1:, 0], t[1:, 1:], self.sigma

    def cost_y(self, point):
        if self._stamp != (id(point), self.version):
            raise StaleCache("objective not evaluated at this point/state")
        return self._cost_y


def _cg_polish(ctx, point, grad_tol, max_iter, deadline, patience):
    """Conjugate-direction tail for subproblems where BB's rate collapses.

    Polak-Ribiere(+) with projection transport and exact difference
    evaluation; restarts on loss of descent.  The tangent projection is
    self-adjoint, so the PR numerator needs no transported gradient, only
    the direction is carried over.  Returns (gnorm, point, tv, iters) for
    the most stationary iterate seen.
    """
    f = ctx.eval_objective(point)
    proj_prev = ctx.proj_snapshot()
    grad = ctx.eval_egrad(point)
    tv = tangent_project(point, grad)
    g = tv.h_matrix
    gnorm = tv.norm
    gg = gnorm * gnorm
    d = -g
    slope = -gg
    t = 1.0
    best = (gnorm, point, tv)
    best_gnorm = gnorm
    since_best = 0
    iters = 0
    while gnorm > grad_tol and iters < max_iter:
        if deadline is not None and time.monotonic() > deadline:
            break
        if since_best >= patience:
            break
        iters += 1
        t = min(4.0 * t, _BB_MAX)
        accepted = False
        restarted = False
        while t >= _STEP_FLOOR:
            try:
                cand = retract(point, t * d)
            except RetractionFailed:
                t *= _BACKTRACK
                continue
            delta = ctx.eval_delta(point, cand, proj_prev)
            if delta <= _ARMIJO_C * t * slope:
                accepted = True
                break
            if t < 1e-8 and not restarted:
                # direction went bad; fall back to steepest descent once
                restarted = True
                d = -g
                slope = -gg
                t = 1.0
                continue
            t *= _BACKTRACK
        if not accepted:
            break
        point = cand
        f += delta
        ctx.proj_snapshot(out=proj_prev)
        grad = ctx.eval_egrad(point)
        tv = tangent_project(point, grad)
        g_new = tv.h_matrix
        gnorm = tv.norm
        gg_new = gnorm * gnorm
        beta = max(0.0, (gg_new - float(np.einsum("ij,ij->", g_new, g))) / gg)
        d = tangent_project(point, d).h_matrix
        d *= beta
        d -= g_new
        g, gg = g_new, gg_new
        slope = float(np.einsum("ij,ij->", d, g))
        if slope >= -1e-3 * float(np.linalg.norm(d)) * gnorm:
            d = -g
            slope = -gg
        if gnorm < best[0]:
            best = (gnorm, point, tv)
        if gnorm < 0.9 * best_gnorm:
            best_gnorm = gnorm
            since_best = 0
        else:
            since_best += 1
    gnorm, point, tv = best
    return gnorm, point, tv, iters


def rgd_solve(ctx, point, grad_tol, max_iter=2000, deadline=None,
              patience=_STALL_ITERS):
    """Descend the penalized objective until the projected gradient is small.

    Alternating Barzilai-Borwein steps safeguarded to [1e-10, 1e10] with a
    5-iterate nonmonotone backtracking acceptance.  Near stationarity the
    acceptance test switches to exact difference evaluation (the demanded
    decreases sink below f's rounding noise long before the gradient target
    is reached).  If BB stops improving the gradient for `patience`
    iterations, the remaining budget goes to a conjugate-direction tail.
    Returns (point, lam, mu, grad_norm, iters) for the most stationary
    iterate seen; the multipliers come from the final gradient projection
    and feed the dual recovery directly.
    """
    f = ctx.eval_objective(point)
    grad = ctx.eval_egrad(point)
    tv = tangent_project(point, grad)
    gnorm = tv.norm
    window = deque([f], maxlen=_WINDOW)
    prev = None  # (r_matrix, h_matrix) of previous accepted iterate
    step = 1.0 / max(gnorm, 1.0)
    iters = 0
    best_gnorm = gnorm
    since_best = 0
    best = (gnorm, point, tv)  # BB iterates oscillate; keep the stationariest
    precise = False  # once latched, f is tracked through exact differences
    proj_prev = None
    while gnorm > grad_tol and iters < max_iter:
        if deadline is not None and time.monotonic() > deadline:
            break
        if since_best >= patience:
            # BB stopped making progress; hand the remaining budget to the
            # conjugate-direction tail, which handles the ill-conditioned
            # basins BB zigzags in (its contraction is steady but slow, so
            # it gets a longer stall leash).  Terminal either way.
            gn2, p2, tv2, cg_its = _cg_polish(
                ctx, point, grad_tol, max_iter - iters, deadline,
                max(5 * patience, 500))
            iters += cg_its
            if gn2 < gnorm:
                gnorm, point, tv = gn2, p2, tv2
            break
        iters += 1
        if prev is not None:
            s = point.r_matrix - prev[0]
            y = tv.h_matrix - prev[1]
            sy = float(np.einsum("ij,ij->", s, y))
            if sy > 0:
                if iters % 2:
                    step = float(np.einsum("ij,ij->", s, s)) / sy
                else:
                    step = sy / float(np.einsum("ij,ij->", y, y))
            # nonpositive curvature: reuse the previous step
            step = min(max(step, _BB_MIN), _BB_MAX)
        f_ref = max(window)
        # absolute rounding level of f; sufficient-decrease demands finer
        # than this are noise, so they are forgiven rather than backtracked
        noise = 8.0 * np.finfo(float).eps * (1.0 + abs(f_ref))
        if not precise and \
                _ARMIJO_C * min(step, 1.0) * gnorm * gnorm < noise:
            # the demanded decrease sank below what f resolves; from here
            # on compare exact differences so backtracking stays meaningful
            # (the window switches to values relative to the incumbent)
            precise = True
            if ctx._stamp != (id(point), ctx.version):
                ctx.eval_objective(point)
            proj_prev = ctx.proj_snapshot()
            window.clear()
            window.append(0.0)
            f_ref = 0.0
        t = step
        accepted = None
        while t >= _STEP_FLOOR:
            try:
                cand = retract(point, -t * tv.h_matrix)
            except RetractionFailed:
                t *= _BACKTRACK
                continue
            if precise:
                delta = ctx.eval_delta(point, cand, proj_prev)
                if delta <= f_ref - _ARMIJO_C * t * gnorm * gnorm:
                    accepted = (cand, delta)
                    break
            else:
                f_cand = ctx.eval_objective(cand)
                if f_cand <= f_ref - _ARMIJO_C * t * gnorm * gnorm + noise:
                    accepted = (cand, f_cand)
                    break
            t *= _BACKTRACK
        if accepted is None:
            if not precise:
                # before giving up, see whether the failure is just f's
                # rounding noise: redo this iteration on exact differences
                precise = True
                if ctx._stamp != (id(point), ctx.version):
                    ctx.eval_objective(point)
                proj_prev = ctx.proj_snapshot()
                window.clear()
                window.append(0.0)
                iters -= 1
                continue
            break  # genuine numerical floor; the best iterate stands
        prev = (point.r_matrix, tv.h_matrix)
        if precise:
            point, delta = accepted
            f += delta
            # window entries are f(iterate) - f(incumbent); shift to the
            # new incumbent, whose own entry is zero by definition
            for i in range(len(window)):
                window[i] -= delta
            window.append(0.0)
            ctx.proj_snapshot(out=proj_prev)
        else:
            point, f = accepted
            window.append(f)
        grad = ctx.eval_egrad(point)
        tv = tangent_project(point, grad)
        gnorm = tv.norm
        if gnorm < best[0]:
            best = (gnorm, point, tv)
        if gnorm < 0.9 * best_gnorm:
            best_gnorm = gnorm
            since_best = 0
        else:
            since_best += 1
    if gnorm > best[0]:
        gnorm, point, tv = best
    # make sure the context cache sits at the returned point
    if ctx._stamp != (id(point), ctx.version):
        ctx.eval_objective(point)
    return point, tv.lam, tv.mu, gnorm, iters
