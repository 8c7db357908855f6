"""Sparse symmetric positive-definite linear algebra.

The factorization is split into a symbolic phase (fill-reducing ordering,
elimination tree, pattern of L) that depends only on the sparsity pattern,
and a numeric phase that is repeated for every hyperparameter value. The
inner loops are compiled with numba.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numba
import numpy as np
import scipy.sparse as sp


class NotPositiveDefinite(np.linalg.LinAlgError):
    """Raised when a pivot falls below 1e-12 times the largest diagonal entry."""


class DimensionMismatch(ValueError):
    pass


PIVOT_TOL = 1e-12


@dataclass(frozen=True)
class SymSparse:
    """Symmetric sparse matrix stored by its lower triangle (coalesced)."""

    dim: int
    rows: np.ndarray
    cols: np.ndarray
    vals: np.ndarray

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError("dim must be >= 1")
        if np.any(self.rows < self.cols):
            raise ValueError("entries must lie in the lower triangle")

    @classmethod
    def from_coo(cls, dim, rows, cols, vals):
        """Build from arbitrary triplets; upper-triangle entries are mirrored
        to the lower triangle and duplicates are summed."""
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        vals = np.asarray(vals, dtype=float)
        lo = np.maximum(rows, cols)
        hi = np.minimum(rows, cols)
        key = hi * dim + lo
        uniq, inv = np.unique(key, return_inverse=True)
        summed = np.bincount(inv, weights=vals, minlength=uniq.size)
        return cls(dim, uniq % dim, uniq // dim, summed)

    @classmethod
    def from_dense(cls, a):
        a = np.asarray(a, dtype=float)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise DimensionMismatch("matrix must be square")
        r, c = np.nonzero(np.tril(a))
        # keep the diagonal in the pattern even where it is exactly zero
        d = np.arange(a.shape[0])
        return cls.from_coo(
            a.shape[0],
            np.concatenate([r, d]),
            np.concatenate([c, d]),
            np.concatenate([a[r, c], np.zeros(d.size)]),
        )

    @classmethod
    def from_scipy(cls, m):
        m = sp.coo_matrix(m)
        keep = m.row >= m.col
        return cls.from_coo(m.shape[0], m.row[keep], m.col[keep], m.data[keep])

    def to_scipy(self):
        off = self.rows != self.cols
        r = np.concatenate([self.rows, self.cols[off]])
        c = np.concatenate([self.cols, self.rows[off]])
        v = np.concatenate([self.vals, self.vals[off]])
        return sp.csc_matrix((v, (r, c)), shape=(self.dim, self.dim))

    def to_dense(self):
        return self.to_scipy().toarray()

    def __add__(self, other):
        if not isinstance(other, SymSparse):
            return NotImplemented
        if other.dim != self.dim:
            raise DimensionMismatch("dimensions differ")
        return SymSparse.from_coo(
            self.dim,
            np.concatenate([self.rows, other.rows]),
            np.concatenate([self.cols, other.cols]),
            np.concatenate([self.vals, other.vals]),
        )

    def matvec(self, x):
        x = np.asarray(x, dtype=float)
        y = np.bincount(self.rows, weights=self.vals * x[self.cols], minlength=self.dim)
        off = self.rows != self.cols
        y += np.bincount(
            self.cols[off], weights=self.vals[off] * x[self.rows[off]], minlength=self.dim
        )
        return y


# ---------------------------------------------------------------------------
# Ordering
# ---------------------------------------------------------------------------


def _adjacency(dim, rows, cols):
    adj = [set() for _ in range(dim)]
    for r, c in zip(rows.tolist(), cols.tolist()):
        if r != c:
            adj[r].add(c)
            adj[c].add(r)
    return adj


def minimum_degree_order(dim, rows, cols):
    """Minimum-degree ordering with dense-row postponement.

    Nodes whose initial degree exceeds max(16, 10*sqrt(n)) are removed from
    the graph and ordered last, as approximate minimum degree does. Ties are
    broken by the lowest original index so that block-structured inputs keep
    their natural order.
    """
    adj = _adjacency(dim, rows, cols)
    thresh = max(16.0, 10.0 * np.sqrt(dim))
    dense = [v for v in range(dim) if len(adj[v]) > thresh]
    dense_set = set(dense)
    alive = [v for v in range(dim) if v not in dense_set]
    for v in alive:
        adj[v] -= dense_set
    alive_set = set(alive)

    # bucket queue keyed by degree
    import heapq

    heap = [(len(adj[v]), v) for v in alive]
    heapq.heapify(heap)
    degree = {v: len(adj[v]) for v in alive}
    order = []
    while heap:
        d, v = heapq.heappop(heap)
        if v not in alive_set or d != degree[v]:
            continue
        order.append(v)
        alive_set.discard(v)
        nbrs = adj[v]
        for a in nbrs:
            adj[a].discard(v)
            adj[a] |= nbrs - {a}
        for a in nbrs:
            nd = len(adj[a])
            if nd != degree[a]:
                degree[a] = nd
                heapq.heappush(heap, (nd, a))
        adj[v] = set()
    order.extend(dense)
    return np.asarray(order, dtype=np.int64)


# ---------------------------------------------------------------------------
# Numeric kernels
# ---------------------------------------------------------------------------


@numba.njit(cache=True)
def _chol_numeric(n, Lp, Li, Lx, Rp, Rk, Rpos, tol):
    w = np.zeros(n)
    for j in range(n):
        start = Lp[j]
        end = Lp[j + 1]
        for q in range(start, end):
            w[Li[q]] = Lx[q]
        for r in range(Rp[j], Rp[j + 1]):
            k = Rk[r]
            p = Rpos[r]
            ljk = Lx[p]
            for q in range(p, Lp[k + 1]):
                w[Li[q]] -= ljk * Lx[q]
        d = w[j]
        if not d > tol:
            return j
        ljj = np.sqrt(d)
        Lx[start] = ljj
        w[j] = 0.0
        for q in range(start + 1, end):
            i = Li[q]
            Lx[q] = w[i] / ljj
            w[i] = 0.0
    return -1


@numba.njit(cache=True)
def _find(Lp, Li, col, row):
    lo = Lp[col]
    hi = Lp[col + 1] - 1
    while lo <= hi:
        mid = (lo + hi) // 2
        v = Li[mid]
        if v == row:
            return mid
        if v < row:
            lo = mid + 1
        else:
            hi = mid - 1
    return -1


@numba.njit(cache=True)
def _takahashi(n, Lp, Li, Lx):
    Sx = np.zeros(Lx.size)
    for j in range(n - 1, -1, -1):
        start = Lp[j]
        end = Lp[j + 1]
        ljj = Lx[start]
        for q in range(end - 1, start, -1):
            i = Li[q]
            s = 0.0
            for r in range(start + 1, end):
                k = Li[r]
                if k == i:
                    sik = Sx[Lp[i]]
                elif k < i:
                    sik = Sx[_find(Lp, Li, k, i)]
                else:
                    sik = Sx[_find(Lp, Li, i, k)]
                s += Lx[r] * sik
            Sx[q] = -s / ljj
        s = 0.0
        for r in range(start + 1, end):
            s += Lx[r] * Sx[r]
        Sx[start] = 1.0 / (ljj * ljj) - s / ljj
    return Sx


@numba.njit(cache=True)
def _lsolve(n, Lp, Li, Lx, b):
    x = b.copy()
    for j in range(n):
        x[j] /= Lx[Lp[j]]
        xj = x[j]
        for q in range(Lp[j] + 1, Lp[j + 1]):
            x[Li[q]] -= Lx[q] * xj
    return x


@numba.njit(cache=True)
def _ltsolve(n, Lp, Li, Lx, b):
    x = b.copy()
    for j in range(n - 1, -1, -1):
        s = x[j]
        for q in range(Lp[j] + 1, Lp[j + 1]):
            s -= Lx[q] * x[Li[q]]
        x[j] = s / Lx[Lp[j]]
    return x


# ---------------------------------------------------------------------------
# Symbolic analysis and factor objects
# ---------------------------------------------------------------------------


@dataclass
class SymbolicCholesky:
    """Ordering and fill pattern for one sparsity pattern.

    ``perm[i]`` is the original index placed at position i, so the factored
    matrix is ``Q[perm][:, perm]``.
    """

    dim: int
    perm: np.ndarray
    iperm: np.ndarray
    Lp: np.ndarray
    Li: np.ndarray
    Rp: np.ndarray
    Rk: np.ndarray
    Rpos: np.ndarray
    _keys: np.ndarray = field(repr=False)

    @classmethod
    def analyze(cls, dim, rows, cols, perm=None):
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        if perm is None:
            perm = minimum_degree_order(dim, rows, cols)
        perm = np.asarray(perm, dtype=np.int64)
        iperm = np.empty_like(perm)
        iperm[perm] = np.arange(dim)
        pr, pc = iperm[rows], iperm[cols]
        lo, hi = np.maximum(pr, pc), np.minimum(pr, pc)

        struct = [set() for _ in range(dim)]
        for r, c in zip(lo.tolist(), hi.tolist()):
            if r != c:
                struct[c].add(r)
        children = [[] for _ in range(dim)]
        colsets = []
        for j in range(dim):
            s = struct[j]
            for c in children[j]:
                s |= colsets[c]
            s.discard(j)
            colsets.append(s)
            if s:
                children[min(s)].append(j)
        counts = np.array([len(s) + 1 for s in colsets], dtype=np.int64)
        Lp = np.zeros(dim + 1, dtype=np.int64)
        np.cumsum(counts, out=Lp[1:])
        Li = np.empty(Lp[-1], dtype=np.int64)
        for j, s in enumerate(colsets):
            Li[Lp[j]] = j
            Li[Lp[j] + 1 : Lp[j + 1]] = sorted(s)

        colidx = np.repeat(np.arange(dim, dtype=np.int64), counts)
        keys = colidx * dim + Li
        off = Li != colidx
        order = np.lexsort((colidx[off], Li[off]))
        Rrow = Li[off][order]
        Rk = colidx[off][order]
        Rpos = np.nonzero(off)[0][order]
        Rp = np.zeros(dim + 1, dtype=np.int64)
        np.cumsum(np.bincount(Rrow, minlength=dim), out=Rp[1:])
        return cls(dim, perm, iperm, Lp, Li, Rp, Rk.astype(np.int64), Rpos.astype(np.int64), keys)

    @property
    def nnz(self):
        return int(self.Lp[-1])

    def slots(self, rows, cols):
        """Positions in the factor value array for original coordinates."""
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        pr, pc = self.iperm[rows], self.iperm[cols]
        key = np.minimum(pr, pc) * self.dim + np.maximum(pr, pc)
        pos = np.searchsorted(self._keys, key)
        if np.any(pos >= self._keys.size) or np.any(self._keys[np.minimum(pos, self._keys.size - 1)] != key):
            raise ValueError("coordinate outside the analyzed pattern")
        return pos

    def factor_slots(self, values, max_diag=None):
        """Numeric factorization from values already scattered into slots."""
        Lx = np.array(values, dtype=float)
        if max_diag is None:
            max_diag = np.max(np.abs(Lx[self.Lp[:-1]]))
        tol = PIVOT_TOL * max(max_diag, 1e-300)
        fail = _chol_numeric(self.dim, self.Lp, self.Li, Lx, self.Rp, self.Rk, self.Rpos, tol)
        if fail >= 0:
            raise NotPositiveDefinite(f"non-positive pivot at permuted column {fail}")
        return CholFactor(self, Lx)

    def factor(self, Q: SymSparse):
        if Q.dim != self.dim:
            raise DimensionMismatch("matrix dimension differs from analysis")
        vals = np.bincount(self.slots(Q.rows, Q.cols), weights=Q.vals, minlength=self.nnz)
        diag = Q.vals[Q.rows == Q.cols]
        return self.factor_slots(vals, max_diag=np.max(np.abs(diag)) if diag.size else 0.0)


class CholFactor:
    """P Q P^T = L L^T with L stored column-compressed."""

    def __init__(self, symbolic: SymbolicCholesky, Lx: np.ndarray):
        self.symbolic = symbolic
        self.Lx = Lx
        self._sel_inv = None

    @property
    def dim(self):
        return self.symbolic.dim

    @property
    def permutation(self):
        return self.symbolic.perm

    @property
    def logdet(self):
        return 2.0 * float(np.sum(np.log(self.Lx[self.symbolic.Lp[:-1]])))

    @property
    def L(self):
        s = self.symbolic
        return sp.csc_matrix((self.Lx, s.Li, s.Lp), shape=(s.dim, s.dim))

    def solve(self, rhs):
        s = self.symbolic
        rhs = np.asarray(rhs, dtype=float)
        if rhs.shape != (s.dim,):
            raise DimensionMismatch(f"rhs has shape {rhs.shape}, expected ({s.dim},)")
        y = _lsolve(s.dim, s.Lp, s.Li, self.Lx, rhs[s.perm])
        x = _ltsolve(s.dim, s.Lp, s.Li, self.Lx, y)
        out = np.empty(s.dim)
        out[s.perm] = x
        return out

    def solve_lt(self, z):
        """x with L^T (P x) = z; x ~ N(0, Q^-1) when z is white noise."""
        s = self.symbolic
        x = _ltsolve(s.dim, s.Lp, s.Li, self.Lx, np.asarray(z, dtype=float))
        out = np.empty(s.dim)
        out[s.perm] = x
        return out

    def selected_inverse(self):
        """Entries of Q^-1 on the pattern of L (permuted coordinates)."""
        if self._sel_inv is None:
            s = self.symbolic
            self._sel_inv = _takahashi(s.dim, s.Lp, s.Li, self.Lx)
        return self._sel_inv

    def marginal_variances(self):
        s = self.symbolic
        d = self.selected_inverse()[s.Lp[:-1]]
        out = np.empty(s.dim)
        out[s.perm] = d
        return out


def factorize(Q: SymSparse, perm=None) -> CholFactor:
    """Sparse Cholesky of a symmetric positive-definite matrix."""
    sym = SymbolicCholesky.analyze(Q.dim, Q.rows, Q.cols, perm=perm)
    return sym.factor(Q)


def solve_system(f: CholFactor, rhs) -> np.ndarray:
    return f.solve(rhs)


def takahashi_marginal_variances(f: CholFactor) -> np.ndarray:
    """diag(Q^-1) from the Cholesky factor via the Takahashi recursions."""
    return f.marginal_variances()
