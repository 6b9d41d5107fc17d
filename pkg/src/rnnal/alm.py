"""Outer augmented Lagrangian loop with dual-certificate-driven rank moves.

Each outer iteration solves the penalized subproblem over the factor
variety to a scheduled inexactness, recovers the conic dual, escapes along
negative curvature of the dual slack when the rank is too small, updates
the entrywise multiplier matrix by the exact cone projection, and grows
the penalty only when primal progress stalls.
"""

import json
import time
from dataclasses import dataclass, field, asdict, replace

import numpy as np
import scipy.sparse as sp

from .cones import proj_p
from .duals import EscapeStalled, EigFailed, increase_rank, decrease_rank, recover_duals
from .linops import RankDeficient
from .problem import add_slacks, build_dnn
from .subsolver import LineSearchFailed, SubproblemContext, rgd_solve
from .variety import (AnchorDegenerate, InitFailed, RetractionFailed,
                      SingularSystem, feasible_init)

_STALL_OUTERS = 20
_ESCAPES_PER_OUTER = 3
_CERT_OUTERS = 20       # extra outers allowed to tighten the certificate
_GROWTH_DEMAND = 0.25   # grow sigma unless rp contracted at least this much
_GROWTH_BALANCE = 0.5   # ... and only while the primal residue is the laggard


@dataclass
class SolverOptions:
    tol: float = 1e-6
    time_limit: float = 3600.0
    sigma0: float = 1.0
    growth: float = 1.25
    sigma_cap: float = 1e8
    rank0: int = None          # default rule: min(200, ceil(n/5))
    tau: int = 1
    seed: int = 0
    max_outer: int = 500
    max_inner: int = 2000
    use_slacks: str = "auto"   # auto | on | off

    def __post_init__(self):
        if self.use_slacks not in ("auto", "on", "off"):
            raise ValueError(f"use_slacks must be auto/on/off, got {self.use_slacks!r}")


@dataclass
class SolveReport:
    status: str                # Converged | TimeLimit | Stalled
    objective: float
    rp: float
    rd: float
    rc: float
    outer_iters: int
    sub_iters: int
    rank: int
    time_secs: float
    flags: list
    name: str
    n: int
    m: int
    options: dict
    point: object = field(default=None, repr=False)
    cert: object = field(default=None, repr=False)
    w_matrix: np.ndarray = field(default=None, repr=False)

    @property
    def max_residue(self):
        return max(self.rp, self.rd, self.rc)


def default_rank(n):
    return min(200, int(np.ceil(n / 5.0)))


def _normalized_model(model):
    """Clone the model with the lifted cost divided by its Frobenius norm.

    Multiplier magnitudes track the cost scale, so on raw instances
    (||C|| in the thousands) the dual takes dozens of outer updates to
    accumulate; a unit-scale cost keeps the penalty schedule meaningful
    across instances.  The feasible set is untouched and every dual
    quantity is homogeneous in the cost, so results are rescaled on exit.
    """
    prob = model.problem
    q = prob.q_matrix
    q_fro = float(np.linalg.norm(q.data)) if sp.issparse(q) else float(np.linalg.norm(q))
    scale = np.sqrt(q_fro ** 2 + 2.0 * float(prob.c_vec @ prob.c_vec))
    if not np.isfinite(scale) or scale <= 1.0:
        return model, 1.0
    prob2 = replace(prob, q_matrix=q / scale, c_vec=prob.c_vec / scale)
    return build_dnn(prob2, name=model.name), float(scale)


def _is_slack_form(model):
    return model.problem.name.endswith("+slack")


def solve(model, opts=None, log_path=None, condlog_path=None):
    """Run the solver; on structural geometry failures retry once on the
    slack reformulation (use_slacks='auto'), or start there ('on')."""
    opts = opts or SolverOptions()
    flags = []
    if opts.use_slacks == "on" and model.m > 0 and not _is_slack_form(model):
        model = build_dnn(add_slacks(model.problem), name=model.name or model.problem.name)
        flags.append("slack_form")
    try:
        return _solve_once(model, opts, flags, log_path, condlog_path)
    except (InitFailed, SingularSystem, RetractionFailed, AnchorDegenerate,
            RankDeficient) as exc:
        if opts.use_slacks != "auto" or model.m == 0 or _is_slack_form(model):
            raise
        model2 = build_dnn(add_slacks(model.problem),
                           name=model.name or model.problem.name)
        flags = ["slack_restart", f"restart_reason:{type(exc).__name__}"]
        return _solve_once(model2, opts, flags, log_path, condlog_path)


def primal_residues(model, y_mat, z_mat):
    """max of the affine residue of Y and the cone gap ||Y - Z||, both
    relatively scaled."""
    prob = model.problem
    n, m = model.n, model.m
    x = y_mat[1:, 0]
    acc = (y_mat[0, 0] - 1.0) ** 2
    if m:
        r1 = model.factors.a_apply(x) - prob.b_vec
        r2 = model.factors.a_apply(y_mat[1:, 1:]) - np.outer(prob.b_vec, x)
        acc += float(r1 @ r1) + float(np.einsum("ij,ij->", r2, r2))
    bset = model.binary_set
    if bset.size:
        r3 = y_mat[1:, 1:][bset, bset] - x[bset]
        acc += float(r3 @ r3)
    rp_aff = np.sqrt(acc) / model.rhs_norm
    gap = y_mat - z_mat
    rp_cone = float(np.linalg.norm(gap)) / (
        1.0 + float(np.linalg.norm(y_mat)) + float(np.linalg.norm(z_mat)))
    return max(rp_aff, rp_cone)


def _solve_once(model, opts, flags, log_path, condlog_path):
    t0 = time.monotonic()
    deadline = t0 + opts.time_limit
    work, scale = _normalized_model(model)
    dim = work.dim
    r0 = opts.rank0 if opts.rank0 else default_rank(work.n)
    r0 = max(1, min(r0, work.n))
    point = feasible_init(work, r0, opts.seed)

    w_tilde = np.zeros((dim, dim))
    sigma = opts.sigma0
    ctx = SubproblemContext(work, w_tilde, sigma)
    y_buf = np.empty((dim, dim))
    z_buf = np.empty((dim, dim))

    log_fh = open(log_path, "w") if log_path else None
    cond_fh = open(condlog_path, "w") if condlog_path else None
    if cond_fh:
        cond_fh.write("outer,sigma_min,cond,system_dim\n")

    eps_h_base = 1e-4 * (1.0 + work.norm_c_inf)
    scale_c = 1.0 + work.norm_c_inf
    total_sub = 0
    rp_prev = np.inf
    stall = 0
    streak = 0
    shrink_count = 0
    flagset = set(flags)
    status = "Stalled"
    rp = rd = rc = np.inf
    obj = np.nan
    cert = None
    k = 0

    try:
        for k in range(1, opts.max_outer + 1):
            sched = 0.5 ** k * 1e-2
            floor = 1e-3 * opts.tol
            if floor >= sched:
                flagset.add("heuristic_inexactness")
            eps_g = max(sched, floor) * scale_c

            try:
                point, lam, mu, gnorm, its = rgd_solve(
                    ctx, point, eps_g, opts.max_inner, deadline)
            except LineSearchFailed:
                flagset.add("line_search_failed")
                ctx.eval_objective(point)
                lam, mu = _stationarity_multipliers(ctx, point)
                gnorm, its = np.inf, 0
            total_sub += its
            if gnorm > eps_g and time.monotonic() < deadline:
                # gave up early: a small trailing factor column makes the
                # parametrization nearly singular and BB crawls through it.
                # Truncation costs O(sigma_r^2) in Y, so retry once from the
                # slimmer factor and keep whichever branch got stationarier.
                f_now = ctx.eval_objective(point)
                slim, cut_ok = decrease_rank(
                    point, ctx, 0.1 * opts.tol * (1.0 + abs(f_now)), cut=1e-3)
                if cut_ok:
                    ctx.eval_objective(slim)
                    try:
                        slim, lam2, mu2, gn2, its2 = rgd_solve(
                            ctx, slim, eps_g, opts.max_inner, deadline)
                        total_sub += its2
                        if gn2 < gnorm:
                            point, lam, mu, gnorm = slim, lam2, mu2, gn2
                    except LineSearchFailed:
                        pass
                ctx.eval_objective(point)
            cert = recover_duals(point, lam, mu, ctx)

            # negative curvature in the dual slack: grow the factor
            eps_h = eps_h_base
            for _ in range(_ESCAPES_PER_OUTER):
                if time.monotonic() > deadline:
                    break
                try:
                    vals, vecs = cert.min_eig(k=opts.tau)
                except EigFailed:
                    flagset.add("eig_failed")
                    break
                neg = vals < -eps_h
                if not np.any(neg):
                    break
                beta = float(np.sum(vals[neg]))
                try:
                    point = increase_rank(point, ctx, vecs[:, neg], beta)
                except EscapeStalled:
                    flagset.add("escape_stalled")
                    break
                try:
                    point, lam, mu, gnorm, its = rgd_solve(
                        ctx, point, eps_g, opts.max_inner, deadline)
                except LineSearchFailed:
                    flagset.add("line_search_failed")
                    ctx.eval_objective(point)
                    lam, mu = _stationarity_multipliers(ctx, point)
                    its = 0
                total_sub += its
                cert = recover_duals(point, lam, mu, ctx)
                eps_h *= 0.5
            else:
                flagset.add("escape_budget_hit")

            # drop dependent columns when free
            eps_i = 1e-6 * (1.0 + abs(ctx.eval_objective(point))) * 0.5 ** shrink_count
            point, changed = decrease_rank(point, ctx, eps_i)
            ctx.eval_objective(point)
            if changed:
                shrink_count += 1
                lam, mu = _stationarity_multipliers(ctx, point)
                cert = recover_duals(point, lam, mu, ctx)

            # exact multiplier update through the cone projection
            r_mat = point.r_matrix
            x = point.first_col()
            y_buf[0, 0] = 1.0
            y_buf[1:, 0] = x
            y_buf[0, 1:] = x
            np.matmul(r_mat, r_mat.T, out=y_buf[1:, 1:])
            np.multiply(w_tilde, 1.0 / sigma, out=z_buf)
            np.subtract(y_buf, z_buf, out=z_buf)
            proj_p(z_buf, work.zero_pattern, out=z_buf)
            w_tilde += sigma * (z_buf - y_buf)

            _check_cone_invariants(w_tilde, z_buf, work.zero_pattern, flagset)

            # residues reported against the caller's cost scale
            rp = primal_residues(work, y_buf, z_buf)
            neg, s_fro, rd_est = cert.psd_parts()
            rd = scale * neg / (1.0 + scale * s_fro)
            if rd_est:
                flagset.add("rd_estimated")
            y_norm = float(np.linalg.norm(y_buf))
            rc = scale * abs(cert.compact_inner(point)) / (
                1.0 + y_norm + scale * s_fro)
            obj = scale * ctx.cost_y(point)
            elapsed = time.monotonic() - t0

            if log_fh:
                vals0 = float(cert._eigh[0][0]) if cert._eigh else None
                log_fh.write(json.dumps({
                    "outer": k, "f": float(ctx.eval_objective(point)),
                    "obj": float(obj), "rp": float(rp), "rd": float(rd),
                    "rc": float(rc), "sigma": float(sigma),
                    "rank": point.rank, "inner": total_sub,
                    "eig_min": vals0, "elapsed": round(elapsed, 3),
                }) + "\n")
                log_fh.flush()
            if cond_fh:
                from .variety import regularity_check
                rep = regularity_check(point)
                cond_fh.write(f"{k},{rep.sigma_min:.6e},{rep.cond:.6e},{rep.system_dim}\n")
                cond_fh.flush()

            done = max(rp, rd, rc) <= opts.tol
            if done:
                # don't stop on a certificate the report can't stand behind:
                # the complementarity and assembly identities should hold at
                # the level the recovery promises, not just at tol.  The
                # streak cap keeps an unpolishable instance from stalling out.
                cert_tol = max(1e-8, 1e-2 * opts.tol)
                asm = scale * float(np.linalg.norm(
                    cert.s_dense() - cert.s_compact_dense())) / (
                    1.0 + model.norm_c_inf)
                streak += 1
                if (rc <= cert_tol and asm <= cert_tol) \
                        or streak > _CERT_OUTERS:
                    if streak > _CERT_OUTERS:
                        flagset.add("certificate_loose")
                    status = "Converged"
                    break
            else:
                streak = 0
            if time.monotonic() > deadline:
                status = "TimeLimit"
                break
            if rp > 0.99 * rp_prev and not done:
                stall += 1
            else:
                stall = 0
            if stall >= _STALL_OUTERS:
                status = "Stalled"
                break
            lagging = rp > _GROWTH_DEMAND * rp_prev and rp > _GROWTH_BALANCE * rd
            # also grow when the primal ran far ahead: the dual needs larger
            # multiplier steps and there is plenty of primal slack to spend
            ahead = rp < 1e-3 * rd
            if lagging or ahead:
                sigma = min(opts.growth * sigma, opts.sigma_cap)
            rp_prev = rp
            ctx.set_state(sigma=sigma)
        else:
            status = "Stalled"
            flagset.add("outer_budget_hit")
    finally:
        if log_fh:
            log_fh.close()
        if cond_fh:
            cond_fh.close()

    if scale != 1.0:
        if cert is not None:
            cert = cert.rescaled(model, scale)
        w_tilde = scale * w_tilde
    return SolveReport(
        status=status, objective=obj, rp=float(rp), rd=float(rd), rc=float(rc),
        outer_iters=k, sub_iters=total_sub, rank=point.rank,
        time_secs=time.monotonic() - t0, flags=sorted(flagset),
        name=model.name or model.problem.name, n=model.n, m=model.m,
        options=asdict(opts), point=point, cert=cert, w_matrix=w_tilde)


def _stationarity_multipliers(ctx, point):
    """Tangent multipliers of the current gradient (fallback path when a
    subsolve could not move)."""
    from .variety import tangent_project
    ctx.eval_objective(point)
    grad = ctx.eval_egrad(point)
    tv = tangent_project(point, grad)
    return tv.lam, tv.mu


def _check_cone_invariants(w_tilde, z_mat, pattern, flagset):
    """The updated multiplier must sit in the dual cone and be orthogonal
    to the projected primal block."""
    wmin = float(np.min(w_tilde))
    if wmin < -1e-10 * max(1.0, float(np.max(np.abs(w_tilde)))):
        if pattern.size:
            masked = w_tilde.copy()
            masked.ravel()[pattern.flat] = 0.0
            wmin = float(np.min(masked))
        if wmin < -1e-10 * max(1.0, float(np.max(np.abs(w_tilde)))):
            flagset.add("w_cone_violation")
    inner = float(np.einsum("ij,ij->", z_mat, w_tilde))
    scale = float(np.linalg.norm(z_mat)) * float(np.linalg.norm(w_tilde))
    if abs(inner) > 1e-10 * max(scale, 1.0):
        flagset.add("complementarity_violation")
