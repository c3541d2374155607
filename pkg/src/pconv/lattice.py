"""Geometry of the permutohedral lattice.

Points of R^d are elevated into the zero-sum hyperplane of R^{d+1}. Lattice
points there have integer coordinates that are all congruent modulo d+1
("remainder-k" points). Every elevated point lies in exactly one simplex whose
d+1 vertices have remainders 0..d.

Lattice points are addressed by integer *keys*: the lattice point multiplied by
d+1. A key is zero-sum with every entry divisible by d+1, and the neighbour of
key ``K`` along offset ``o`` is ``K + (d+1) * o``.
"""

from dataclasses import dataclass
from itertools import product

import numpy as np

ABSENT = -1


def _check_dim(d):
    if int(d) != d or d < 1:
        raise ValueError(f"lattice dimension must be a positive integer, got {d!r}")
    return int(d)


def scale_factors(d: int) -> np.ndarray:
    """Per-axis elevation factors, including the global sqrt(2/3)*(d+1) pre-scale."""
    d = _check_dim(d)
    i = np.arange(d, dtype=np.float64)
    return np.sqrt(2.0 / 3.0) * (d + 1) / np.sqrt((i + 1) * (i + 2))


def elevate(f) -> np.ndarray:
    """Embed features into the zero-sum hyperplane of R^{d+1}.

    Accepts a single feature of shape (d,) or a batch of shape (N, d).
    """
    f = np.asarray(f, dtype=np.float64)
    single = f.ndim == 1
    f2 = np.atleast_2d(f)
    if f2.ndim != 2:
        raise ValueError("features must be a vector or a 2-D array")
    d = _check_dim(f2.shape[1])
    if not np.all(np.isfinite(f2)):
        raise ValueError("feature coordinates must be finite")
    cf = f2 * scale_factors(d)
    out = np.empty((f2.shape[0], d + 1))
    running = np.zeros(f2.shape[0])
    for i in range(d, 0, -1):
        out[:, i] = running - i * cf[:, i - 1]
        running = running + cf[:, i - 1]
    out[:, 0] = running
    return out[0] if single else out


@dataclass(frozen=True)
class SimplexLocation:
    """Enclosing simplex of one elevated point.

    ``vertices[k]`` is the key of the remainder-k vertex and ``barycentric[k]``
    its weight.
    """

    vertices: np.ndarray
    barycentric: np.ndarray
    rank: np.ndarray


def locate_many(y):
    """Vectorised simplex search for a batch of elevated points.

    Args:
        y: (N, d+1) array of zero-sum points.

    Returns:
        keys (N, d+1, d+1) int64, barycentric (N, d+1), rank (N, d+1).
    """
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    n, d1 = y.shape
    d = _check_dim(d1 - 1)
    if not np.all(np.isfinite(y)):
        raise ValueError("elevated coordinates must be finite")

    v = y / d1
    up = np.ceil(v) * d1
    down = np.floor(v) * d1
    rem0 = np.where(up - y < y - down, up, down)
    h = np.rint(rem0.sum(axis=1) / d1).astype(np.int64)

    order = np.argsort(-(y - rem0), axis=1, kind="stable")
    rank = np.empty((n, d1), dtype=np.int64)
    np.put_along_axis(rank, order, np.broadcast_to(np.arange(d1), (n, d1)), axis=1)

    hc = h[:, None]
    move_down = (hc > 0) & (rank >= d1 - hc)
    move_up = (hc < 0) & (rank < -hc)
    rem0 = rem0 - d1 * move_down + d1 * move_up
    rank = rank + hc - d1 * move_down + d1 * move_up

    delta = (y - rem0) / d1
    plus = np.zeros((n, d1 + 1))
    minus = np.zeros((n, d1 + 1))
    np.put_along_axis(plus, d - rank, delta, axis=1)
    np.put_along_axis(minus, d1 - rank, delta, axis=1)
    b = plus - minus
    bary = b[:, :d1].copy()
    bary[:, 0] += 1.0 + b[:, d1]

    rem0_i = np.rint(rem0).astype(np.int64)
    k = np.arange(d1)[None, :, None]
    shift = np.where(rank[:, None, :] <= d - k, k, k - d1)
    keys = d1 * (rem0_i[:, None, :] + shift)
    return keys, bary, rank


def locate(y) -> SimplexLocation:
    """Enclosing simplex, vertex keys and barycentric weights of one point."""
    y = np.asarray(y, dtype=np.float64)
    if y.ndim != 1:
        raise ValueError("locate expects a single point; use locate_many for batches")
    keys, bary, rank = locate_many(y[None, :])
    return SimplexLocation(keys[0], bary[0], rank[0])


@dataclass(frozen=True)
class OffsetTable:
    """Neighbourhood of a lattice node in canonical order.

    ``offsets`` are lattice displacements (zero-sum, all entries congruent
    mod d+1); ``coeffs`` are the generating coefficients over u_i = (d+1)e_i - 1
    with ``min(coeffs) == 0``, sorted lexicographically.
    """

    d: int
    s: int
    offsets: np.ndarray
    coeffs: np.ndarray
    zero_index: int
    negation_map: np.ndarray

    def __len__(self):
        return len(self.offsets)

    @property
    def key_offsets(self) -> np.ndarray:
        """Offsets expressed as key displacements."""
        return (self.d + 1) * self.offsets


def neighbor_count(d: int, s: int) -> int:
    return (s + 1) ** (d + 1) - s ** (d + 1)


def neighbor_offsets(d: int, s: int) -> OffsetTable:
    d = _check_dim(d)
    if int(s) != s or s < 0:
        raise ValueError(f"neighbourhood size must be a non-negative integer, got {s!r}")
    s = int(s)
    coeffs = np.array(
        [c for c in product(range(s + 1), repeat=d + 1) if min(c) == 0],
        dtype=np.int64,
    ).reshape(-1, d + 1)
    offsets = (d + 1) * coeffs - coeffs.sum(axis=1, keepdims=True)

    position = {tuple(c): n for n, c in enumerate(coeffs.tolist())}
    negated = coeffs.max(axis=1, keepdims=True) - coeffs
    negation_map = np.array([position[tuple(c)] for c in negated.tolist()], dtype=np.int64)
    zero_index = position[(0,) * (d + 1)]
    return OffsetTable(d, s, offsets, coeffs, zero_index, negation_map)


def validate_key(key, d: int) -> np.ndarray:
    key = np.asarray(key)
    if key.shape[-1] != d + 1:
        raise ValueError(f"key must have {d + 1} entries")
    if not np.issubdtype(key.dtype, np.integer):
        raise ValueError("key entries must be integers")
    if np.any(key.sum(axis=-1) != 0) or np.any(key % (d + 1)):
        raise ValueError("key must be zero-sum with entries divisible by d+1")
    return key.astype(np.int64)


# largest padded box handled with a direct-address table
_DIRECT_LIMIT = 1 << 24


def _pack_layout(rows):
    lo = rows.min(axis=0)
    radix = rows.max(axis=0) - lo + 1
    total = 1
    for r in radix.tolist():
        total *= r
    if total >= 2**62:
        return None
    strides = np.ones(len(radix), dtype=np.int64)
    for c in range(len(radix) - 2, -1, -1):
        strides[c] = strides[c + 1] * radix[c + 1]
    return lo, radix, strides


class LatticeMap:
    """Exact-key table from lattice keys to dense node indices 0..M-1.

    Single-key access goes through a dict keyed on the first d key entries.
    Bulk lookups pack the stored keys into a bounding box with a mixed-radix
    code, which is injective inside the box, and binary-search the sorted codes.
    """

    def __init__(self, d: int):
        self.d = _check_dim(d)
        self._index = {}
        self._rows = []
        self._cache = None

    def __len__(self):
        return len(self._rows)

    def __contains__(self, key):
        return self.lookup(key) is not None

    def _row(self, key):
        key = validate_key(key, self.d)
        return tuple((key[: self.d] // (self.d + 1)).tolist())

    def insert(self, key) -> int:
        row = self._row(key)
        idx = self._index.get(row)
        if idx is None:
            idx = len(self._rows)
            self._index[row] = idx
            self._rows.append(row)
            self._cache = None
        return idx

    def lookup(self, key):
        """Node index of ``key``, or None when the key was never inserted."""
        return self._index.get(self._row(key))

    def keys(self) -> np.ndarray:
        """All stored keys, shape (M, d+1), in index order."""
        rows = np.array(self._rows, dtype=np.int64).reshape(-1, self.d)
        full = np.concatenate([rows, -rows.sum(axis=1, keepdims=True)], axis=1)
        return (self.d + 1) * full

    def _sorted_codes(self):
        if self._cache is None:
            rows = np.array(self._rows, dtype=np.int64).reshape(-1, self.d)
            layout = _pack_layout(rows) if len(rows) else None
            if layout is None:
                self._cache = (None, None, None)
            else:
                codes = (rows - layout[0]) @ layout[2]
                order = np.argsort(codes, kind="stable")
                self._cache = (layout, codes[order], order)
        return self._cache

    def _lookup_rows(self, rows):
        out = np.full(len(rows), ABSENT, dtype=np.int64)
        if not self._rows or not len(rows):
            return out
        layout, codes, order = self._sorted_codes()
        if layout is None:
            get = self._index.get
            for n, r in enumerate(map(tuple, rows.tolist())):
                out[n] = get(r, ABSENT)
            return out
        lo, radix, strides = layout
        rel = rows - lo
        inside = np.all((rel >= 0) & (rel < radix), axis=1)
        q = rel[inside] @ strides
        pos = np.minimum(np.searchsorted(codes, q), len(codes) - 1)
        hit = codes[pos] == q
        found = np.full(len(q), ABSENT, dtype=np.int64)
        found[hit] = order[pos[hit]]
        out[inside] = found
        return out

    def lookup_many(self, keys) -> np.ndarray:
        """Node indices for a (K, d+1) batch of keys; absent keys give ABSENT."""
        keys = validate_key(np.atleast_2d(keys), self.d)
        return self._lookup_rows(keys[:, : self.d] // (self.d + 1))

    def neighbor_table(self, key_offsets, chunk=32768) -> np.ndarray:
        """Index of ``key + step`` for every stored key and every step, or ABSENT.

        Steps are (K, d+1) keys. Codes are packed in a box padded by the step
        extent, so a neighbour code is the node code plus a per-step delta.
        Small boxes use a direct-address table, larger ones binary search.
        """
        steps = validate_key(np.atleast_2d(key_offsets), self.d)[:, : self.d] // (self.d + 1)
        rows = np.array(self._rows, dtype=np.int64).reshape(-1, self.d)
        m = len(rows)
        out = np.full((m, len(steps)), ABSENT, dtype=np.int64)
        if not m:
            return out
        lo = rows.min(axis=0) + np.minimum(steps.min(axis=0), 0)
        hi = rows.max(axis=0) + np.maximum(steps.max(axis=0), 0)
        layout = _pack_layout(np.stack([lo, hi]))
        if layout is None:
            for a in range(0, m, chunk):
                block = rows[a : a + chunk]
                q = (block[:, None, :] + steps[None, :, :]).reshape(-1, self.d)
                out[a : a + len(block)] = self._lookup_rows(q).reshape(len(block), -1)
            return out
        _, radix, strides = layout
        codes = (rows - lo) @ strides
        delta = steps @ strides
        total = int(np.prod(radix.astype(object)))
        if total <= _DIRECT_LIMIT:
            table = np.full(total, ABSENT, dtype=np.int32 if m < 2**31 else np.int64)
            table[codes] = np.arange(m)
            for a in range(0, m, chunk):
                out[a : a + chunk] = table[codes[a : a + chunk, None] + delta[None, :]]
            return out
        order = np.argsort(codes, kind="stable")
        ordered = codes[order]
        for a in range(0, m, chunk):
            q = codes[a : a + chunk, None] + delta[None, :]
            pos = np.minimum(np.searchsorted(ordered, q), m - 1)
            out[a : a + chunk] = np.where(ordered[pos] == q, order[pos], ABSENT)
        return out

    def insert_many(self, keys) -> np.ndarray:
        """Insert a batch of keys in row order and return their node indices."""
        keys = validate_key(np.atleast_2d(keys), self.d)
        rows = keys[:, : self.d] // (self.d + 1)
        idx = self._lookup_rows(rows)
        new = idx == ABSENT
        if np.any(new):
            fresh = rows[new]
            layout = _pack_layout(fresh)
            if layout is None:
                uniq, first, inverse = np.unique(
                    fresh, axis=0, return_index=True, return_inverse=True
                )
            else:
                codes = (fresh - layout[0]) @ layout[2]
                _, first, inverse = np.unique(codes, return_index=True, return_inverse=True)
                uniq = fresh[first]
            appearance = np.argsort(first, kind="stable")
            relabel = np.empty_like(appearance)
            relabel[appearance] = np.arange(len(appearance))
            base = len(self._rows)
            for n, row in enumerate(map(tuple, uniq[appearance].tolist())):
                self._index[row] = base + n
                self._rows.append(row)
            self._cache = None
            idx[new] = base + relabel[inverse.reshape(-1)]
        return idx
