"""Dual certificate recovery, PSD residue, and rank moves.

At an inner stationary point the tangent-projection multipliers (lam, mu)
pin down the full conic dual: with L = Q - Diag(mu~) - W22 and
q = 2c + mu~ - 2 W21 the remaining multipliers have closed forms, and the
dual slack admits the compact congruence S = N' L N with
N = J_A [-x | I], which is what makes escape directions and the
complementarity residue affordable at scale.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .linops import ja_apply, pinv_apply
from .variety import FactorPoint, RetractionFailed, project_to_variety

_DENSE_EIG_CAP = 4000


class EigFailed(Exception):
    """Iterative eigensolver did not converge and no dense fallback fits."""


class EscapeStalled(Exception):
    """Rank-increase line search exhausted its 50 halvings."""


@dataclass
class DualCertificate:
    """Recovered multipliers and the compact dual-slack representation."""

    model: object
    x: np.ndarray              # first factor column (primal diagonal witness)
    lam1: np.ndarray           # equality rows
    lam2: np.ndarray           # lifted equality block, m x n
    mu: np.ndarray             # binary rows
    alpha: float               # homogenization corner
    l_matrix: np.ndarray       # dense n x n: Q - Diag(mu~) - W22
    q_vec: np.ndarray          # 2c + mu~ - 2 W21
    w11: float
    rd_estimated: bool = False
    _eigh: tuple = field(default=None, repr=False)

    @property
    def n(self):
        return self.model.n

    def s_dense(self):
        """S = C - adjoint(y) - W assembled from the block formulas."""
        model = self.model
        n = self.n
        factors = model.factors
        s = np.empty((n + 1, n + 1))
        s[0, 0] = -self.alpha - self.w11
        top = self.q_vec.copy()
        if model.m:
            top -= factors.at_apply(self.lam1)
            top += self.lam2.T @ model.problem.b_vec
        s[1:, 0] = 0.5 * top
        s[0, 1:] = 0.5 * top
        s22 = self.l_matrix.copy()
        if model.m:
            at_l2 = factors.at_apply(self.lam2)  # n x n: A' lam2
            s22 -= 0.5 * (at_l2 + at_l2.T)
        s[1:, 1:] = s22
        return s

    def s_compact_dense(self):
        """N' L N materialized; equals s_dense up to the assembly residual."""
        factors = self.model.factors
        n = self.n
        nmat = np.empty((n, n + 1))
        nmat[:, 0] = -self.x
        nmat[:, 1:] = np.eye(n)
        nmat = ja_apply(factors, nmat)
        return nmat.T @ (self.l_matrix @ nmat)

    def s_matvec(self, v):
        """(N' L N) v without materializing anything square."""
        factors = self.model.factors
        u = v[1:] - self.x * v[0]
        u = ja_apply(factors, u)
        w = self.l_matrix @ u
        w = ja_apply(factors, w)
        out = np.empty_like(v)
        out[0] = -self.x @ w
        out[1:] = w
        return out

    def assembly_residual(self):
        """Frobenius gap between the block assembly and the congruence form,
        relative to 1 + max |C|."""
        gap = float(np.linalg.norm(self.s_dense() - self.s_compact_dense()))
        return gap / (1.0 + self.model.norm_c_inf)

    def _dense_eig(self):
        if self._eigh is None:
            from scipy.linalg import eigh
            w, v = eigh(self.s_dense())
            self._eigh = (w, v)
        return self._eigh

    def min_eig(self, k=1):
        """k smallest eigenpairs of S; dense below the size cap, otherwise
        a deterministic Lanczos run on the compact operator (flagging the
        PSD residue as estimated)."""
        n = self.n
        if n <= _DENSE_EIG_CAP:
            w, v = self._dense_eig()
            return w[:k], v[:, :k]
        from scipy.sparse.linalg import LinearOperator, eigsh
        op = LinearOperator((n + 1, n + 1), matvec=self.s_matvec)
        v0 = np.full(n + 1, 1.0 / np.sqrt(n + 1))
        try:
            w, v = eigsh(op, k=k, which="SA", maxiter=3000, v0=v0)
        except Exception as exc:
            raise EigFailed(f"compact eigensolve failed: {exc}") from exc
        self.rd_estimated = True
        order = np.argsort(w)
        return w[order], v[:, order]

    def psd_parts(self, k=20):
        """(||proj_PSD(-S)||_F, ||S||_F, estimated) without the relative
        scaling, so callers can re-normalize against a rescaled cost."""
        n = self.n
        if n <= _DENSE_EIG_CAP:
            w, _ = self._dense_eig()
            neg = np.minimum(w, 0.0)
            return float(np.linalg.norm(neg)), float(np.linalg.norm(w)), False
        w, _ = self.min_eig(k=min(k, n))
        neg = np.minimum(w, 0.0)
        self.rd_estimated = True
        return float(np.linalg.norm(neg)), self._fro_estimate(), True

    def psd_residue(self, k=20):
        """||proj_PSD(-S)||_F / (1 + ||S||_F); exact when dense fits."""
        neg, fro, est = self.psd_parts(k=k)
        return neg / (1.0 + fro), est

    def s_fro(self):
        if self.n <= _DENSE_EIG_CAP:
            w, _ = self._dense_eig()
            return float(np.linalg.norm(w))
        return self._fro_estimate()

    def _fro_estimate(self, probes=16):
        rng = np.random.Generator(np.random.Philox(0xF120))
        dim = self.n + 1
        acc = 0.0
        for _ in range(probes):
            v = rng.standard_normal(dim)
            acc += float(np.linalg.norm(self.s_matvec(v)) ** 2 / (v @ v))
        return float(np.sqrt(acc / probes * dim))

    def compact_inner(self, point):
        """<S, Y> evaluated through the congruence: <L (N Rhat), N Rhat>."""
        r0 = point.r_matrix.copy()
        r0[:, 0] = 0.0
        k = ja_apply(self.model.factors, r0)
        return float(np.einsum("ij,ij->", self.l_matrix @ k, k))

    def rescaled(self, model, scale):
        """Certificate for `model` whose cost is `scale` times this one's.

        Dual multipliers are positively homogeneous in the cost, so every
        recovered quantity just picks up the factor; cached eigenpairs
        transfer with scaled eigenvalues."""
        out = DualCertificate(
            model=model, x=self.x, lam1=scale * self.lam1,
            lam2=scale * self.lam2, mu=scale * self.mu,
            alpha=scale * self.alpha, l_matrix=scale * self.l_matrix,
            q_vec=scale * self.q_vec, w11=scale * self.w11,
            rd_estimated=self.rd_estimated)
        if self._eigh is not None:
            out._eigh = (scale * self._eigh[0], self._eigh[1])
        return out


def recover_duals(point, lam, mu, ctx):
    """Closed-form dual completion from the tangent multipliers.

    lam, mu are the least-squares multipliers of the final gradient
    projection; ctx must hold the objective cache at exactly `point` so its
    projected-residual buffer is the matching multiplier surrogate.
    """
    from .subsolver import StaleCache

    if ctx._stamp != (id(point), ctx.version):
        raise StaleCache("context cache not at the certificate point")
    model = ctx.model
    factors = model.factors
    n, m = model.n, model.m
    t00, t21, t22, sigma = ctx.w_blocks()
    w11 = sigma * float(t00)
    prob_q = model.problem.q_matrix
    l_mat = np.asarray(prob_q.todense()) if sp.issparse(prob_q) else prob_q.copy()
    l_mat = l_mat - sigma * t22
    mu_full = np.zeros(n)
    bset = model.binary_set
    if bset.size:
        mu_full[bset] = mu
        l_mat[np.arange(n), np.arange(n)] -= mu_full
    q_vec = 2.0 * model.problem.c_vec + mu_full - 2.0 * sigma * t21
    x = point.first_col().copy()
    if m == 0 and bset.size:
        # The tangent-space multipliers carry the inner solve's gradient
        # residue into the assembly identity, all of it in the mixed block:
        # gap(mu) = q/2 + Lx is affine diagonal in mu with slope 1/2 - x_i.
        # Refit mu to zero it row by row.  Each correction is clamped so the
        # induced eigenvalue shift of S stays far below the solve tolerance
        # (rows with x_i at exactly 1/2 would otherwise blow up); rows
        # outside B stay, since no multiplier controls them.
        gap = 0.5 * q_vec + l_mat @ x
        slope = 0.5 - x
        cap = 2e-7 * (1.0 + float(np.linalg.norm(l_mat)))
        with np.errstate(divide="ignore", invalid="ignore"):
            delta = np.where(slope != 0.0, -gap / slope, 0.0)
        np.clip(delta, -cap, cap, out=delta)
        mask = np.zeros(n, dtype=bool)
        mask[bset] = True
        delta[~mask] = 0.0
        mu = mu + delta[bset]
        mu_full += delta
        l_mat[np.arange(n), np.arange(n)] -= delta
        q_vec += delta
    if m:
        adag_b = pinv_apply(factors, model.problem.b_vec)
        lam1 = factors.aat_solve(factors.a_apply(q_vec + l_mat @ adag_b))
        adag = pinv_apply(factors, np.eye(m))
        l_adag_t = (l_mat @ adag).T  # m x n
        a_dense = factors.a_matrix
        if sp.issparse(a_dense):
            a_dense = np.asarray(a_dense.todense())
        lam2 = 2.0 * l_adag_t - (l_adag_t @ adag) @ a_dense
    else:
        lam1 = np.zeros(0)
        lam2 = np.zeros((0, n))
    xj = ja_apply(factors, x)
    alpha = -float(xj @ (l_mat @ xj)) - w11
    return DualCertificate(
        model=model, x=x, lam1=lam1, lam2=lam2,
        mu=mu.copy() if bset.size else np.zeros(0),
        alpha=alpha, l_matrix=l_mat, q_vec=q_vec, w11=w11)


# ---------------------------------------------------------------------------
# Rank moves


def escape_direction(point, vecs):
    """Second-order escape data from eigenvectors of S.

    Returns (padded point P = [R, 0], step matrix U = [0, H]) where
    H = N V maps the negative-curvature eigenvectors into the ambient
    factor space; U is tangent to the padded variety at P by construction.
    """
    model = point.model
    r_mat = point.r_matrix
    n, r = r_mat.shape
    tau = vecs.shape[1]
    h = vecs[1:, :] - np.outer(point.first_col(), vecs[0, :])
    h = ja_apply(model.factors, h)
    p_mat = np.hstack([r_mat, np.zeros((n, tau))])
    u_mat = np.hstack([np.zeros((n, r)), h])
    return FactorPoint(model, p_mat), u_mat


def increase_rank(point, ctx, vecs, beta, max_halvings=50):
    """Step off a stationary point along negative curvature of S.

    beta = <S, V V'> < 0 gives the local quadratic model
    f(retract(P + t U)) ~ f(R) + beta t^2; acceptance is Armijo against
    that model with c = 1e-4 and at most 50 halvings (EscapeStalled)."""
    padded, u_mat = escape_direction(point, vecs)
    if float(np.linalg.norm(u_mat)) < 1e-14:
        raise EscapeStalled("escape direction annihilated by the projections")
    f0 = ctx.eval_objective(padded)
    t = 1.0
    for _ in range(max_halvings):
        try:
            cand = point_retract_raw(padded, t * u_mat)
        except RetractionFailed:
            t *= 0.5
            continue
        f_cand = ctx.eval_objective(cand)
        if f_cand <= f0 + 1e-4 * beta * t * t:
            return cand
        t *= 0.5
    raise EscapeStalled(f"no decrease matching beta = {beta:.3e}")


def point_retract_raw(point, step):
    """Retraction that tolerates large escape steps (no step cap)."""
    return project_to_variety(point.model, point.r_matrix + step)


def decrease_rank(point, ctx, eps_allow, cut=1e-8):
    """Drop numerically dependent columns when the objective allows it.

    Thin SVD of the homogenized factor, truncating singular values below
    `cut` times the largest; the leading block is rotated so the anchor row
    realigns with the first coordinate, then projected back. Accepted only
    when the objective rises by at most eps_allow; returns (point, changed)
    and never errors (falls back to the input)."""
    r_mat = point.r_matrix
    n, r = r_mat.shape
    if r <= 1:
        return point, False
    rhat = np.vstack([np.zeros((1, r)), r_mat])
    rhat[0, 0] = 1.0
    u, s, _vt = np.linalg.svd(rhat, full_matrices=False)
    keep = int(np.sum(s >= cut * s[0]))
    keep = max(keep, 1)
    if keep >= r:
        return point, False
    b = u[:, :keep] * s[:keep]
    # Householder: rotate so the anchor row is a positive multiple of e1
    top = b[0]
    nrm = float(np.linalg.norm(top))
    if nrm < 1e-14:
        return point, False
    v = top.copy()
    v[0] -= nrm
    vn = float(v @ v)
    if vn > 1e-30:
        b = b - 2.0 * np.outer(b @ v, v) / vn
    f_old = ctx.eval_objective(point)
    try:
        cand = project_to_variety(point.model, b[1:, :])
    except RetractionFailed:
        return point, False
    f_new = ctx.eval_objective(cand)
    if f_new <= f_old + eps_allow:
        return cand, True
    return point, False


# ---------------------------------------------------------------------------
# Certificate file round-trip


def write_certificate(path, point, cert, w_matrix):
    """Plain-text certificate: factor, multipliers, and the dual matrix W."""
    r_mat = point.r_matrix
    n, r = r_mat.shape
    m = cert.model.m
    nb = cert.mu.size
    lines = ["RNNAL-CERT v1", f"n {n} m {m} r {r} nb {nb}"]

    def emit(tag, arr):
        arr = np.atleast_2d(arr)
        lines.append(f"{tag}:")
        for row in arr:
            lines.append(" ".join(repr(float(v)) for v in row))

    emit("R", r_mat)
    emit("lam1", cert.lam1.reshape(1, -1) if m else np.zeros((1, 0)))
    emit("lam2", cert.lam2 if m else np.zeros((0, n)))
    emit("mu", cert.mu.reshape(1, -1) if nb else np.zeros((1, 0)))
    emit("alpha", np.array([[cert.alpha]]))
    emit("W", w_matrix)
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def write_primal_only(path, y_matrix):
    """Certificate holding just the lifted primal matrix (no duals).

    What an external PSD solver can export; `check` then reports the
    primal residue only.
    """
    y = np.asarray(y_matrix, dtype=float)
    dim = y.shape[0]
    lines = ["RNNAL-CERT v1-primal", f"dim {dim}", "Y:"]
    for row in y:
        lines.append(" ".join(repr(float(v)) for v in row))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_certificate(path):
    """Inverse of write_certificate / write_primal_only; dict of arrays."""
    with open(path) as fh:
        lines = [ln.rstrip("\n") for ln in fh]
    if lines and lines[0] == "RNNAL-CERT v1-primal":
        dim = int(lines[1].split()[1])
        y = np.array([[float(t) for t in lines[2 + 1 + i].split()]
                      for i in range(dim)])
        if y.shape != (dim, dim):
            raise ValueError("primal block shape mismatch")
        return {"Y": y}
    if not lines or lines[0] != "RNNAL-CERT v1":
        raise ValueError("not a certificate file")
    hdr = lines[1].split()
    n, m, r, nb = int(hdr[1]), int(hdr[3]), int(hdr[5]), int(hdr[7])
    idx = 2
    out = {"n": n, "m": m, "r": r, "nb": nb}

    def grab(tag, rows):
        nonlocal idx
        if lines[idx] != f"{tag}:":
            raise ValueError(f"expected {tag}: at line {idx + 1}")
        idx += 1
        block = []
        for _ in range(rows):
            block.append([float(t) for t in lines[idx].split()])
            idx += 1
        return np.array(block)

    out["R"] = grab("R", n).reshape(n, r)
    out["lam1"] = grab("lam1", 1).reshape(-1)[:m]
    lam2 = grab("lam2", m)  # header line must be consumed even when m = 0
    out["lam2"] = lam2.reshape(m, n) if m else np.zeros((0, n))
    out["mu"] = grab("mu", 1).reshape(-1)[:nb]
    out["alpha"] = float(grab("alpha", 1)[0, 0])
    out["W"] = grab("W", n + 1)
    return out


def certificate_from_arrays(model, data):
    """Rebuild a DualCertificate from read_certificate output.

    Reconstructs L and q from the model cost, the binary multipliers and
    the stored W, so the residues can be recomputed without trusting any
    derived quantity in the file.
    """
    n = model.n
    w = data["W"]
    w21 = w[1:, 0]
    w22 = w[1:, 1:]
    prob_q = model.problem.q_matrix
    l_mat = np.asarray(prob_q.todense()) if sp.issparse(prob_q) else prob_q.copy()
    l_mat = l_mat - w22
    mu = np.asarray(data["mu"], dtype=float)
    mu_full = np.zeros(n)
    bset = model.binary_set
    if bset.size:
        mu_full[bset] = mu
        l_mat[np.arange(n), np.arange(n)] -= mu_full
    q_vec = 2.0 * model.problem.c_vec + mu_full - 2.0 * w21
    return DualCertificate(
        model=model, x=data["R"][:, 0].copy(), lam1=data["lam1"],
        lam2=data["lam2"], mu=mu, alpha=data["alpha"],
        l_matrix=l_mat, q_vec=q_vec, w11=float(w[0, 0]))
