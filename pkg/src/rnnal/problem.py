"""Problem types, instance generators, family builders, and file parsers.

Index convention: every in-memory API is 0-based. The text formats
(ORLIB, Gset, QAPLIB, and the generic exchange format) are 1-based on disk
and converted at the parser boundary.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .cones import ConePattern, PatternError
from .linops import factorize_constraints


class InvalidProblem(Exception):
    """Shapes, symmetry, signs, or index sets violate the model contract."""


class ParseError(Exception):
    """Malformed input file; message carries the 1-based line number."""

    def __init__(self, msg, line=None):
        self.line = line
        super().__init__(f"line {line}: {msg}" if line is not None else msg)


class AsymmetryError(ParseError):
    """Both (i, j) and (j, i) triplets present with conflicting values."""


class DuplicateEdge(Exception):
    """An edge repeats (in either orientation) in a graph input."""


class InvalidMarginals(Exception):
    """A marginal vector has a negative entry or does not sum to one."""


_SYM_RTOL = 1e-14


def _as_2d(mat, name):
    if sp.issparse(mat):
        return mat
    arr = np.asarray(mat, dtype=float)
    if arr.ndim != 2:
        raise InvalidProblem(f"{name} must be 2-d, got shape {arr.shape}")
    return arr


def _check_symmetric(q, name="q_matrix"):
    if sp.issparse(q):
        gap = abs(q - q.T)
        gap = gap.max() if gap.nnz else 0.0
        scale = abs(q).max() if q.nnz else 0.0
    else:
        gap = float(np.max(np.abs(q - q.T))) if q.size else 0.0
        scale = float(np.max(np.abs(q))) if q.size else 0.0
    if gap > _SYM_RTOL * max(scale, 1.0):
        raise InvalidProblem(f"{name} asymmetric: max |Q - Q'| = {gap:.3e}")


@dataclass
class MbqpProblem:
    """min x'Qx + 2c'x  s.t.  Ax = b, x_i in {0,1} (i in binary_set),
    x_i x_j = 0 ((i,j) in incompat_set), x >= 0.

    q_matrix: symmetric n x n (dense or scipy sparse)
    c_vec: length n
    a_matrix: m x n with full row rank; m = 0 allowed
    b_vec: length m, elementwise nonnegative
    binary_set: sorted 0-based indices
    incompat_set: 0-based (i, j) pairs with i < j
    """

    q_matrix: object
    c_vec: np.ndarray
    a_matrix: object
    b_vec: np.ndarray
    binary_set: np.ndarray
    incompat_set: tuple = ()
    name: str = ""

    def __post_init__(self):
        self.q_matrix = _as_2d(self.q_matrix, "q_matrix")
        n = self.q_matrix.shape[0]
        if self.q_matrix.shape != (n, n):
            raise InvalidProblem(f"q_matrix not square: {self.q_matrix.shape}")
        _check_symmetric(self.q_matrix)
        self.c_vec = np.asarray(self.c_vec, dtype=float).reshape(-1)
        if self.c_vec.shape != (n,):
            raise InvalidProblem(f"c_vec length {self.c_vec.shape[0]} != n = {n}")
        if self.a_matrix is None:
            self.a_matrix = np.zeros((0, n))
        self.a_matrix = _as_2d(self.a_matrix, "a_matrix")
        m = self.a_matrix.shape[0]
        if self.a_matrix.shape[1] != n:
            raise InvalidProblem(
                f"a_matrix has {self.a_matrix.shape[1]} columns, expected {n}")
        self.b_vec = np.asarray(self.b_vec, dtype=float).reshape(-1)
        if self.b_vec.shape != (m,):
            raise InvalidProblem(f"b_vec length {self.b_vec.shape[0]} != m = {m}")
        if m and self.b_vec.min() < 0:
            raise InvalidProblem("b_vec has a negative entry")
        self.binary_set = np.asarray(sorted(int(i) for i in self.binary_set), dtype=np.intp)
        if len(set(self.binary_set.tolist())) != len(self.binary_set):
            raise InvalidProblem("binary_set has duplicates")
        if self.binary_set.size and not (
                0 <= self.binary_set[0] and self.binary_set[-1] < n):
            raise InvalidProblem("binary_set index out of range")
        pairs = []
        for i, j in self.incompat_set:
            i, j = int(i), int(j)
            if not (0 <= i < j < n):
                raise InvalidProblem(f"incompat pair ({i}, {j}) out of range or not i < j")
            pairs.append((i, j))
        if len(set(pairs)) != len(pairs):
            raise InvalidProblem("incompat_set has duplicates")
        self.incompat_set = tuple(sorted(pairs))

    @property
    def n(self):
        return self.q_matrix.shape[0]

    @property
    def m(self):
        return self.a_matrix.shape[0]


def mbqp_objective(prob, x):
    """x'Qx + 2c'x."""
    x = np.asarray(x, dtype=float)
    return float(x @ (prob.q_matrix @ x) + 2.0 * prob.c_vec @ x)


def problems_equal(p, q):
    """Exact structural equality; used by round-trip tests."""
    def dense(a):
        return np.asarray(a.todense()) if sp.issparse(a) else np.asarray(a)
    return (p.n == q.n and p.m == q.m
            and np.array_equal(dense(p.q_matrix), dense(q.q_matrix))
            and np.array_equal(p.c_vec, q.c_vec)
            and np.array_equal(dense(p.a_matrix), dense(q.a_matrix))
            and np.array_equal(p.b_vec, q.b_vec)
            and np.array_equal(p.binary_set, q.binary_set)
            and p.incompat_set == q.incompat_set)


# ---------------------------------------------------------------------------
# DNN lifting


@dataclass
class DnnModel:
    """Lifted data for min <C, Y> over the DNN relaxation.

    dim = n + 1; cost_c is the symmetric lifted cost [[0, c'], [c, Q]]
    (sparse when Q is sparse). The affine constraints tracked by the outer
    loop are: A Y21 = b, A Y22 = b Y12, diag_B(Y22) = (Y21)_B, Y11 = 1,
    for a total of m + m n + |B| + 1 rows.
    """

    problem: MbqpProblem
    dim: int
    cost_c: object
    zero_pattern: ConePattern
    factors: object
    constraint_count: int
    norm_c_inf: float
    name: str = ""

    @property
    def n(self):
        return self.dim - 1

    @property
    def m(self):
        return self.problem.m

    @property
    def binary_set(self):
        return self.problem.binary_set

    @property
    def rhs_norm(self):
        b = self.problem.b_vec
        return float(np.sqrt(b @ b + 1.0))

    def cost_blocks(self):
        """(C21 vector, C22 block) without densifying a sparse cost."""
        q = self.problem.q_matrix
        return self.problem.c_vec, q


def build_dnn(prob, name=None):
    """Assemble the lifted model; validation errors raise InvalidProblem."""
    if not isinstance(prob, MbqpProblem):
        raise InvalidProblem("expected an MbqpProblem")
    n = prob.n
    q = prob.q_matrix
    if sp.issparse(q):
        cost = sp.bmat(
            [[sp.csr_matrix((1, 1)),
              sp.csr_matrix(prob.c_vec.reshape(1, -1))],
             [sp.csr_matrix(prob.c_vec.reshape(-1, 1)), q]],
            format="csr")
        norm_inf = max(
            float(abs(q).max()) if q.nnz else 0.0,
            float(np.max(np.abs(prob.c_vec))) if n else 0.0,
        )
    else:
        cost = np.zeros((n + 1, n + 1))
        cost[0, 1:] = prob.c_vec
        cost[1:, 0] = prob.c_vec
        cost[1:, 1:] = q
        norm_inf = float(np.max(np.abs(cost))) if cost.size else 0.0
    try:
        pattern = ConePattern(n + 1, prob.incompat_set)
    except PatternError as exc:
        raise InvalidProblem(str(exc)) from exc
    factors = factorize_constraints(prob.a_matrix)
    count = prob.m + prob.m * n + prob.binary_set.size + 1
    return DnnModel(
        problem=prob,
        dim=n + 1,
        cost_c=cost,
        zero_pattern=pattern,
        factors=factors,
        constraint_count=count,
        norm_c_inf=norm_inf,
        name=name if name is not None else prob.name,
    )


def add_slacks(prob):
    """Equality-preserving slack reformulation.

    Ax = b becomes [A I 0; A 0 -I](x; s1; s2) = (b; b) with s1, s2 >= 0
    forced by the cone; any feasible point has s1 = s2 = 0. The new
    constraint matrix contains identity blocks, so it always has full row
    rank, and the induced variety satisfies the linear-independence
    condition everywhere. m = 0 returns the problem unchanged.
    """
    m, n = prob.m, prob.n
    if m == 0:
        return prob
    a = prob.a_matrix
    if not sp.issparse(a):
        a = sp.csr_matrix(a)
    eye = sp.identity(m, format="csr")
    a_new = sp.bmat([[a, eye, None], [a, None, -eye]], format="csr")
    q = prob.q_matrix
    if not sp.issparse(q):
        q = sp.csr_matrix(q)
    q_new = sp.block_diag([q, sp.csr_matrix((2 * m, 2 * m))], format="csr")
    c_new = np.concatenate([prob.c_vec, np.zeros(2 * m)])
    b_new = np.concatenate([prob.b_vec, prob.b_vec])
    return MbqpProblem(
        q_matrix=q_new, c_vec=c_new, a_matrix=a_new, b_vec=b_new,
        binary_set=prob.binary_set.copy(), incompat_set=prob.incompat_set,
        name=(prob.name + "+slack") if prob.name else "")


# ---------------------------------------------------------------------------
# Random generators (counter-based PRNG for cross-platform determinism)


def _gen(seed):
    return np.random.Generator(np.random.Philox(seed))


def _random_sym_triplets(n, density, low, high, rng):
    """Row-chunked draw over the n(n+1)/2 upper slots (diagonal included)."""
    rows, cols, vals = [], [], []
    for i in range(n):
        width = n - i
        mask = rng.random(width) < density
        draw = rng.integers(low, high + 1, size=width)
        js = np.nonzero(mask)[0] + i
        if js.size:
            rows.append(np.full(js.size, i, dtype=np.intp))
            cols.append(js)
            vals.append(draw[mask].astype(float))
    if not rows:
        return (np.zeros(0, dtype=np.intp),) * 2 + (np.zeros(0),)
    return np.concatenate(rows), np.concatenate(cols), np.concatenate(vals)


def _sym_from_triplets(n, rows, cols, vals):
    off = rows != cols
    r = np.concatenate([rows, cols[off]])
    c = np.concatenate([cols, rows[off]])
    v = np.concatenate([vals, vals[off]])
    return sp.csr_matrix((v, (r, c)), shape=(n, n))


def gen_biq(n, density, seed):
    """Random unconstrained binary quadratic instance, minimization form.

    Integer entries uniform on [-100, 100], each of the n(n+1)/2 upper
    slots present independently with probability `density`.
    """
    if n < 1 or not (0.0 <= density <= 1.0):
        raise InvalidProblem("need n >= 1 and density in [0, 1]")
    rng = _gen(seed)
    rows, cols, vals = _random_sym_triplets(n, density, -100, 100, rng)
    q = _sym_from_triplets(n, rows, cols, -vals)  # negate: max -> min
    return MbqpProblem(
        q_matrix=q, c_vec=np.zeros(n), a_matrix=np.zeros((0, n)),
        b_vec=np.zeros(0), binary_set=np.arange(n),
        name=f"biq-n{n}-d{density:g}-s{seed}")


def gen_qkp(n, p, seed):
    """Random quadratic knapsack, equality capacity, minimization form.

    Profits integer uniform [1, 100] present with probability p (diagonal
    included), weights integer uniform [1, 50], capacity 0.9 * sum(weights).
    """
    if n < 1 or not (0.0 < p <= 1.0):
        raise InvalidProblem("need n >= 1 and p in (0, 1]")
    rng = _gen(seed)
    rows, cols, vals = _random_sym_triplets(n, p, 1, 100, rng)
    q = _sym_from_triplets(n, rows, cols, -vals)
    a = rng.integers(1, 51, size=n).astype(float)
    tau = 0.9 * float(a.sum())
    return MbqpProblem(
        q_matrix=q, c_vec=np.zeros(n), a_matrix=a.reshape(1, -1),
        b_vec=np.array([tau]), binary_set=np.arange(n),
        name=f"qkp-n{n}-p{p:g}-s{seed}")


def _sample_edges(n, k, rng):
    """k distinct unordered pairs, rejection-sampled deterministically."""
    seen = {}
    while len(seen) < k:
        batch = rng.integers(0, n, size=(max(4 * (k - len(seen)), 16), 2))
        for i, j in batch:
            if i == j:
                continue
            key = (int(min(i, j)), int(max(i, j)))
            if key not in seen:
                seen[key] = None
                if len(seen) == k:
                    break
    return sorted(seen.keys())


def gen_dqkp(n, d, seed):
    """Quadratic knapsack with ~floor(d*n) random pairwise-exclusion edges.

    Profits drawn at density 0.9; capacity sum(weights) / max-degree.
    """
    k = int(d * n)
    if n < 2 or d < 0 or k > n * (n - 1) // 2:
        raise InvalidProblem("need n >= 2 and 0 <= floor(d*n) <= n(n-1)/2")
    rng = _gen(seed)
    rows, cols, vals = _random_sym_triplets(n, 0.9, 1, 100, rng)
    q = _sym_from_triplets(n, rows, cols, -vals)
    a = rng.integers(1, 51, size=n).astype(float)
    edges = _sample_edges(n, k, rng) if k else []
    deg = np.zeros(n, dtype=int)
    for i, j in edges:
        deg[i] += 1
        deg[j] += 1
    maxdeg = max(int(deg.max()) if n else 0, 1)
    tau = float(a.sum()) / maxdeg
    return MbqpProblem(
        q_matrix=q, c_vec=np.zeros(n), a_matrix=a.reshape(1, -1),
        b_vec=np.array([tau]), binary_set=np.arange(n),
        incompat_set=tuple(edges), name=f"dqkp-n{n}-d{d:g}-s{seed}")


def gen_gwd(l, k, seed):
    """Random transport-correlation instance over l x k point clouds.

    Samples two 3-d Gaussian clouds, takes pairwise Euclidean metrics and
    uniform marginals; n = l*k couplings, no binaries.
    """
    if l < 2 or k < 2:
        raise InvalidProblem("need at least two support points per side")
    rng = _gen(seed)
    px = rng.standard_normal((l, 3))
    py = rng.standard_normal((k, 3))
    dx = np.linalg.norm(px[:, None, :] - px[None, :, :], axis=2)
    dy = np.linalg.norm(py[:, None, :] - py[None, :, :], axis=2)
    return build_gwd(
        dx, dy, np.full(l, 1.0 / l), np.full(k, 1.0 / k),
        name=f"gwd-{l}x{k}-s{seed}")


# ---------------------------------------------------------------------------
# Structured family builders


def build_qap(w_matrix, d_matrix, use_slacks=False, name=""):
    """Quadratic assignment: min <X, W X D> over permutation matrices,
    vectorized column-major so Q = kron(D, W).

    Without slacks the (redundant) last assignment row is dropped to keep A
    full row rank; with slacks the full doubly-stochastic system is kept and
    the equality rows are rewritten through paired slack variables.
    """
    w = np.asarray(w_matrix, dtype=float)
    d = np.asarray(d_matrix, dtype=float)
    p = w.shape[0]
    if w.shape != (p, p) or d.shape != (p, p):
        raise InvalidProblem("W and D must be square and equally sized")
    _check_symmetric(w, "W")
    _check_symmetric(d, "D")
    n = p * p
    q = np.kron(d, w)
    ones_row = np.ones((1, p))
    eye = np.eye(p)
    a_full = np.vstack([np.kron(ones_row, eye), np.kron(eye, ones_row)])
    b_full = np.ones(2 * p)
    base = dict(q_matrix=q, c_vec=np.zeros(n), binary_set=np.arange(n),
                name=name or f"qap-p{p}")
    if use_slacks:
        prob = MbqpProblem(a_matrix=a_full, b_vec=b_full, **base)
        return add_slacks(prob)
    return MbqpProblem(a_matrix=a_full[:-1], b_vec=b_full[:-1], **base)


def build_theta(n, edges, name=""):
    """Stable-set relaxation input: Q = -I, pairwise exclusions on edges."""
    norm = []
    seen = set()
    for i, j in edges:
        i, j = int(i), int(j)
        if i == j:
            raise DuplicateEdge(f"self-loop at {i}")
        key = (min(i, j), max(i, j))
        if key in seen:
            raise DuplicateEdge(f"edge {key} repeats")
        seen.add(key)
        norm.append(key)
    q = -sp.identity(n, format="csr")
    return MbqpProblem(
        q_matrix=q, c_vec=np.zeros(n), a_matrix=np.zeros((0, n)),
        b_vec=np.zeros(0), binary_set=np.arange(n),
        incompat_set=tuple(sorted(norm)), name=name or f"theta-n{n}")


def build_gwd(dist_x, dist_y, marg_x, marg_y, name=""):
    """Gromov-Wasserstein discrepancy lower-bound model (maximization of
    the coupling correlation, negated): Q = -kron(D_Y, D_X), transport
    polytope rows with the redundant final row dropped, no binaries."""
    dx = np.asarray(dist_x, dtype=float)
    dy = np.asarray(dist_y, dtype=float)
    ax = np.asarray(marg_x, dtype=float).reshape(-1)
    ay = np.asarray(marg_y, dtype=float).reshape(-1)
    l, k = ax.size, ay.size
    if dx.shape != (l, l) or dy.shape != (k, k):
        raise InvalidProblem("distance matrices must match marginal lengths")
    _check_symmetric(dx, "dist_x")
    _check_symmetric(dy, "dist_y")
    for v, lbl in ((ax, "marg_x"), (ay, "marg_y")):
        if v.min() < 0:
            raise InvalidMarginals(f"{lbl} has a negative entry")
        if abs(v.sum() - 1.0) > 1e-10:
            raise InvalidMarginals(f"{lbl} sums to {v.sum():.12f}, not 1")
    n = l * k
    q = -np.kron(dy, dx)
    row_sums = np.kron(np.ones((1, k)), np.eye(l))
    col_sums = np.kron(np.eye(k), np.ones((1, l)))
    a = np.vstack([row_sums, col_sums])[:-1]
    b = np.concatenate([ax, ay])[:-1]
    return MbqpProblem(
        q_matrix=q, c_vec=np.zeros(n), a_matrix=a, b_vec=b,
        binary_set=np.zeros(0, dtype=np.intp), name=name or f"gwd-{l}x{k}")


# ---------------------------------------------------------------------------
# Parsers (1-based text formats)


class _Tokens:
    """Whitespace tokenizer that remembers the line each token came from."""

    def __init__(self, path):
        self.items = []
        with open(path) as fh:
            for ln, line in enumerate(fh, start=1):
                for tok in line.split():
                    self.items.append((ln, tok))
        self.pos = 0
        self.last_line = self.items[-1][0] if self.items else 0

    def next(self, kind=str, what="token"):
        if self.pos >= len(self.items):
            raise ParseError(f"unexpected end of file, wanted {what}", self.last_line)
        ln, tok = self.items[self.pos]
        self.pos += 1
        try:
            return ln, kind(tok)
        except ValueError:
            raise ParseError(f"bad {what} {tok!r}", ln) from None

    def next_int(self, what="integer"):
        return self.next(int, what)

    def next_float(self, what="value"):
        return self.next(float, what)

    def done(self):
        return self.pos >= len(self.items)


def parse_orlib_biq(path):
    """ORLIB unconstrained binary quadratic file -> list of MbqpProblem.

    Layout: instance count; then per instance a header `n nnz` followed by
    nnz 1-based triplets `i j q_ij`. Each value is added into Q_ij and
    Q_ji (diagonal once). File objective is maximization; problems are
    returned negated in minimization form.
    """
    toks = _Tokens(path)
    _, count = toks.next_int("instance count")
    out = []
    for idx in range(count):
        _, n = toks.next_int("n")
        ln, nnz = toks.next_int("nnz")
        if n < 1 or nnz < 0:
            raise ParseError(f"bad instance header n={n} nnz={nnz}", ln)
        rows = np.empty(nnz, dtype=np.intp)
        cols = np.empty(nnz, dtype=np.intp)
        vals = np.empty(nnz)
        for t in range(nnz):
            li, i = toks.next_int("row index")
            lj, j = toks.next_int("col index")
            _, v = toks.next_float("entry")
            if not (1 <= i <= n and 1 <= j <= n):
                raise ParseError(f"index ({i}, {j}) out of range 1..{n}", li)
            rows[t], cols[t], vals[t] = i - 1, j - 1, v
        q = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
        q = q + q.T - sp.diags(q.diagonal())
        out.append(MbqpProblem(
            q_matrix=(-q).tocsr(), c_vec=np.zeros(n),
            a_matrix=np.zeros((0, n)), b_vec=np.zeros(0),
            binary_set=np.arange(n), name=f"orlib[{idx}]"))
    if not toks.done():
        ln, tok = toks.items[toks.pos]
        raise ParseError(f"trailing data {tok!r} after last instance", ln)
    return out


def parse_gset(path):
    """Gset graph file -> (n, 0-based edge list). Header `n m`, then m
    lines `i j w`; weights are ignored by the stable-set builder."""
    toks = _Tokens(path)
    _, n = toks.next_int("node count")
    _, m = toks.next_int("edge count")
    edges = []
    for _ in range(m):
        li, i = toks.next_int("edge endpoint")
        _, j = toks.next_int("edge endpoint")
        _, _w = toks.next_float("edge weight")
        if not (1 <= i <= n and 1 <= j <= n) or i == j:
            raise ParseError(f"bad edge ({i}, {j})", li)
        edges.append((min(i, j) - 1, max(i, j) - 1))
    if not toks.done():
        ln, tok = toks.items[toks.pos]
        raise ParseError(f"trailing data {tok!r}", ln)
    return n, edges


def parse_qaplib(path):
    """QAPLIB .dat file -> (W, D) as dense float arrays."""
    toks = _Tokens(path)
    ln, p = toks.next_int("size")
    if p < 1:
        raise ParseError(f"bad size {p}", ln)
    mats = []
    for _ in range(2):
        vals = np.empty(p * p)
        for t in range(p * p):
            _, vals[t] = toks.next_float("matrix entry")
        mats.append(vals.reshape(p, p))
    if not toks.done():
        ln, tok = toks.items[toks.pos]
        raise ParseError(f"trailing data {tok!r}", ln)
    return mats[0], mats[1]


_GENERIC_SECTIONS = ("Q:", "c:", "A:", "b:", "B:", "E:")


def parse_generic(path):
    """Generic exchange format -> MbqpProblem.

    Header `MBQP n m nb ne`, then sections Q:/c:/A:/b:/B:/E: in order.
    Q and A are 1-based triplets (upper triangle for Q), c and b are plain
    value lists, B is a 1-based index list, E is 1-based pairs i < j.
    """
    toks = _Tokens(path)
    ln, magic = toks.next(str, "header")
    if magic != "MBQP":
        raise ParseError(f"expected 'MBQP' header, got {magic!r}", ln)
    _, n = toks.next_int("n")
    _, m = toks.next_int("m")
    _, nb = toks.next_int("|B|")
    _, ne = toks.next_int("|E|")
    if n < 1 or m < 0 or not (0 <= nb <= n) or ne < 0:
        raise ParseError(f"bad header counts n={n} m={m} nb={nb} ne={ne}", ln)

    def expect(section):
        lns, tok = toks.next(str, "section header")
        if tok != section:
            raise ParseError(f"expected section {section!r}, got {tok!r}", lns)

    def read_triplets(nrows, ncols, section):
        expect(section)
        entries = {}
        while not toks.done() and toks.items[toks.pos][1] not in _GENERIC_SECTIONS:
            li, i = toks.next_int("row index")
            _, j = toks.next_int("col index")
            _, v = toks.next_float("value")
            if not (1 <= i <= nrows and 1 <= j <= ncols):
                raise ParseError(f"index ({i}, {j}) out of range", li)
            if (i, j) in entries:
                raise ParseError(f"duplicate triplet ({i}, {j})", li)
            entries[(i, j)] = (li, v)
        return entries

    q_entries = read_triplets(n, n, "Q:")
    q = np.zeros((n, n))
    for (i, j), (li, v) in q_entries.items():
        mirror = q_entries.get((j, i))
        if i != j and mirror is not None and mirror[1] != v:
            raise AsymmetryError(
                f"Q({i},{j}) = {v} conflicts with Q({j},{i}) = {mirror[1]}", li)
        q[i - 1, j - 1] = v
        q[j - 1, i - 1] = v

    expect("c:")
    c = np.empty(n)
    for t in range(n):
        _, c[t] = toks.next_float("c entry")

    a_entries = read_triplets(m, n, "A:")
    a = np.zeros((m, n))
    for (i, j), (_, v) in a_entries.items():
        a[i - 1, j - 1] = v

    expect("b:")
    b = np.empty(m)
    for t in range(m):
        _, b[t] = toks.next_float("b entry")

    expect("B:")
    bset = []
    for _ in range(nb):
        li, i = toks.next_int("binary index")
        if not 1 <= i <= n:
            raise ParseError(f"binary index {i} out of range", li)
        bset.append(i - 1)

    expect("E:")
    epairs = []
    for _ in range(ne):
        li, i = toks.next_int("pair index")
        _, j = toks.next_int("pair index")
        if not (1 <= i < j <= n):
            raise ParseError(f"pair ({i}, {j}) must satisfy 1 <= i < j <= n", li)
        epairs.append((i - 1, j - 1))
    if not toks.done():
        ln, tok = toks.items[toks.pos]
        raise ParseError(f"trailing data {tok!r}", ln)
    try:
        return MbqpProblem(
            q_matrix=q, c_vec=c, a_matrix=a, b_vec=b,
            binary_set=np.array(bset, dtype=np.intp),
            incompat_set=tuple(epairs))
    except InvalidProblem as exc:
        raise ParseError(str(exc), toks.last_line) from exc


def write_generic(prob, path):
    """Serialize in the canonical generic format: sorted upper-triangular
    triplets, repr floats, fixed section order. parse(write(p)) == p and a
    second write of the parsed problem is byte-identical."""
    q = prob.q_matrix
    if sp.issparse(q):
        q = np.asarray(q.todense())
    a = prob.a_matrix
    if sp.issparse(a):
        a = np.asarray(a.todense())
    lines = [f"MBQP {prob.n} {prob.m} {prob.binary_set.size} {len(prob.incompat_set)}"]
    lines.append("Q:")
    for i in range(prob.n):
        for j in range(i, prob.n):
            if q[i, j] != 0.0:
                lines.append(f"{i + 1} {j + 1} {float(q[i, j])!r}")
    lines.append("c:")
    for v in prob.c_vec:
        lines.append(repr(float(v)))
    lines.append("A:")
    for i in range(prob.m):
        for j in range(prob.n):
            if a[i, j] != 0.0:
                lines.append(f"{i + 1} {j + 1} {float(a[i, j])!r}")
    lines.append("b:")
    for v in prob.b_vec:
        lines.append(repr(float(v)))
    lines.append("B:")
    for i in prob.binary_set:
        lines.append(str(int(i) + 1))
    lines.append("E:")
    for i, j in prob.incompat_set:
        lines.append(f"{i + 1} {j + 1}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
