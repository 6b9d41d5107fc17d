"""Entrywise cone P = (nonnegative matrices) intersect (forced zero pattern).

The pattern lives strictly inside the lower-right n x n block of the lifted
(n+1) x (n+1) frame: the homogenization row and column are never patterned.
Projections run in place on caller buffers when out= aliases the input.
"""

import numpy as np


class PatternError(Exception):
    """Zero-pattern touches the first row or column, or indices clash."""


class ConePattern:
    """Symmetric index set of entries forced to zero inside the X22 block.

    pairs: iterable of 0-based (i, j), i < j, indices into the n x n block.
    Stored raveled (both orientations) against the (n+1) x (n+1) frame so a
    single fancy-index hits every patterned entry.
    """

    def __init__(self, dim, pairs=()):
        self.dim = dim  # n + 1
        pairs = [(int(i), int(j)) for i, j in pairs]
        for i, j in pairs:
            if not (0 <= i < j <= dim - 2):
                raise PatternError(f"bad pattern pair ({i}, {j}) for dim {dim}")
        if len(set(pairs)) != len(pairs):
            raise PatternError("duplicate pattern pair")
        rows = np.array([i + 1 for i, j in pairs] + [j + 1 for i, j in pairs], dtype=np.intp)
        cols = np.array([j + 1 for i, j in pairs] + [i + 1 for i, j in pairs], dtype=np.intp)
        self.pairs = tuple(pairs)
        self.flat = rows * dim + cols

    @property
    def size(self):
        return len(self.pairs)

    def mask(self):
        """Dense boolean mask of patterned entries, mostly for tests."""
        m = np.zeros((self.dim, self.dim), dtype=bool)
        m.ravel()[self.flat] = True
        return m


def proj_p(x, pattern, out=None):
    """Project onto P: clamp negatives to zero, then zero the pattern."""
    if out is None:
        out = np.empty_like(x)
    np.maximum(x, 0.0, out=out)
    if pattern.size:
        out.ravel()[pattern.flat] = 0.0
    return out


def proj_pstar(x, pattern, out=None):
    """Project onto the dual cone P*: patterned entries pass through
    untouched (they are free), everything else clamps to nonnegative."""
    if pattern.size:
        kept = x.ravel()[pattern.flat].copy()
    if out is None:
        out = np.empty_like(x)
    np.maximum(x, 0.0, out=out)
    if pattern.size:
        out.ravel()[pattern.flat] = kept
    return out


def moreau_split(x, pattern):
    """Return (proj_p(x), proj_pstar(-x)); the pair satisfies
    x = proj_p(x) - proj_pstar(-x) exactly and the parts are complementary."""
    plus = proj_p(x, pattern)
    minus = proj_pstar(-x, pattern)
    return plus, minus
