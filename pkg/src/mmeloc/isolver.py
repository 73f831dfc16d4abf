"""Square-root information smoother.

Linearized factors are stacked into a whitened system A dx = b and reduced to
an upper-triangular R with rhs d. New factors are folded into R with Givens
rotations, and all factors are relinearized only when the estimate has moved
far enough from the linearization point.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numba
import numpy as np
from scipy import sparse

from .errors import NonFiniteJacobian, RankDeficient, SingularR

RANK_TOL = 1e-12


# ----------------------------------------------------------------------------
# linear system


class LinearSystem:
    """Whitened system A dx = b over block variables.

    A may be given sparse or dense; the other form is built on first access.
    """

    def __init__(self, A, b, variables: list, sizes: list):
        if sparse.issparse(A):
            self._csr, self._dense = sparse.csr_matrix(A, dtype=float), None
        else:
            self._csr, self._dense = None, np.atleast_2d(np.asarray(A, dtype=float))
        self.b = np.asarray(b, dtype=float).reshape(-1)
        self.variables = list(variables)
        self.sizes = list(sizes)
        self.cliques = None
        m, n = self.shape
        if m != len(self.b):
            raise ValueError("A and b row counts differ")
        if sum(self.sizes) != n:
            raise ValueError("variable sizes do not cover A's columns")

    @property
    def shape(self) -> tuple:
        return (self._dense if self._dense is not None else self._csr).shape

    @property
    def A(self) -> sparse.csr_matrix:
        if self._csr is None:
            self._csr = sparse.csr_matrix(self._dense)
        return self._csr

    @property
    def dense(self) -> np.ndarray:
        if self._dense is None:
            self._dense = self._csr.toarray()
        return self._dense

    @classmethod
    def from_dense(cls, A, b, variables=None, sizes=None) -> "LinearSystem":
        A = np.atleast_2d(np.asarray(A, dtype=float))
        n = A.shape[1]
        if variables is None:
            variables, sizes = list(range(n)), [1] * n
        return cls(A, b, list(variables), list(sizes))

    @property
    def offsets(self) -> dict:
        off, out = 0, {}
        for k, s in zip(self.variables, self.sizes):
            out[k] = off
            off += s
        return out


class LinearFactor:
    """Linear Gaussian factor (sum_k A_k x_k - z) / sigma over block variables."""

    def __init__(self, keys: Sequence, blocks: Sequence, z, sigma: float = 1.0):
        self.keys = tuple(keys)
        self.blocks = [np.atleast_2d(np.asarray(B, dtype=float)) for B in blocks]
        self.z = np.atleast_1d(np.asarray(z, dtype=float))
        self.sigma = float(sigma)
        self.dim = len(self.z)
        if len(self.blocks) != len(self.keys) or any(B.shape[0] != self.dim for B in self.blocks):
            raise ValueError("one block per key, each with len(z) rows")

    def residual(self, values: dict) -> np.ndarray:
        pred = sum(B @ np.asarray(values[k], dtype=float) for k, B in zip(self.keys, self.blocks))
        return (pred - self.z) / self.sigma

    def whitened(self, values: dict):
        return self.residual(values), [B / self.sigma for B in self.blocks]

    def energy(self, values: dict) -> float:
        r = self.residual(values)
        return float(r @ r)


def linearize(factors: Iterable, values: dict, fixed: Optional[set] = None,
              variables: Optional[list] = None) -> LinearSystem:
    """Stack whitened Jacobians of all factors at the given linearization points.

    Each factor exposes `keys` and `whitened(values) -> (r, [J_k])`. Keys in
    `fixed` are constants; their Jacobian blocks are dropped.
    """
    fixed = fixed or set()
    factors = list(factors)
    if variables is None:
        seen = {}
        for f in factors:
            for k in f.keys:
                if k not in fixed and k not in seen:
                    seen[k] = len(values[k])
        variables = sorted(seen, key=_sort_key)
    sizes = [len(values[k]) for k in variables]
    index = {k: j for j, k in enumerate(variables)}
    off = np.cumsum([0] + sizes)

    # group factors that can be linearized in one vectorized call
    groups: dict = {}
    for f in factors:
        batch = getattr(type(f), "batch_whitened", None)
        gk = (type(f), len(f.keys), f.dim) if batch is not None else (id(f),)
        groups.setdefault(gk, []).append(f)

    pieces = []  # (factors, r (k x dim), [J_p (k x dim x size)])
    for gk, fs in groups.items():
        if len(gk) == 3:
            r, Js = gk[0].batch_whitened(fs, values)
        else:
            r1, J1 = fs[0].whitened(values)
            r = np.asarray(r1, dtype=float)[None, :]
            Js = [np.asarray(J, dtype=float).reshape(1, len(r1), -1) for J in J1]
        if not (np.all(np.isfinite(r)) and all(np.all(np.isfinite(J)) for J in Js)):
            raise NonFiniteJacobian(f"non-finite linearization of {type(fs[0]).__name__}")
        pieces.append((fs, r, Js))

    m = sum(r.size for _, r, _ in pieces)
    A = np.zeros((m, int(off[-1])))
    b = np.zeros(m)
    cliques = []
    r0 = 0
    for fs, r, Js in pieces:
        k, dim = r.shape
        rows = r0 + np.arange(k * dim).reshape(k, dim)
        b[rows.ravel()] = -r.ravel()
        cols_by_pos = []
        for p, J in enumerate(Js):
            keys = [f.keys[p] for f in fs]
            keep = np.array([key not in fixed for key in keys])
            if not keep.any():
                cols_by_pos.append(None)
                continue
            start = np.array([off[index[key]] if kp else 0 for key, kp in zip(keys, keep)])
            cols = start[:, None] + np.arange(J.shape[2])[None, :]
            A[rows[keep][:, :, None], cols[keep][:, None, :]] += J[keep]
            cols_by_pos.append([index[key] if kp else None for key, kp in zip(keys, keep)])
        for n in range(k):
            cliques.append([c[n] for c in cols_by_pos if c is not None and c[n] is not None])
        r0 += k * dim
    sys = LinearSystem(A, b, variables, sizes)
    sys.cliques = cliques
    return sys


def _sort_key(k):
    return (0, k) if isinstance(k, (int, np.integer)) else (1, str(k))


# ----------------------------------------------------------------------------
# ordering


def min_degree_order(n_vars: int, cliques: Iterable[Sequence[int]]) -> list:
    """Greedy minimum-degree elimination order on the variable adjacency graph.

    Ties go to the lowest variable index.
    """
    adj = [set() for _ in range(n_vars)]
    for c in cliques:
        c = list(set(c))
        for i in c:
            adj[i].update(c)
    for i in range(n_vars):
        adj[i].discard(i)
    heap = [(len(adj[i]), i) for i in range(n_vars)]
    heapq.heapify(heap)
    done = [False] * n_vars
    order = []
    while heap:
        d, v = heapq.heappop(heap)
        if done[v] or d != len(adj[v]):
            continue  # stale entry
        nb = adj[v]
        for a in nb:
            adj[a].discard(v)
            adj[a].update(nb - {a})
            heapq.heappush(heap, (len(adj[a]), a))
        done[v] = True
        order.append(v)
    return order


# ----------------------------------------------------------------------------
# compiled kernels


@numba.njit(cache=True)
def _householder_banded(A, b, lead):
    # rows of A are sorted by leading column; lead[i] is row i's first nonzero
    m, n = A.shape
    last = np.zeros(m, dtype=np.int64)
    for i in range(m):
        li = -1
        for k in range(n - 1, -1, -1):
            if A[i, k] != 0.0:
                li = k
                break
        last[i] = li
    re = 0
    for j in range(min(m, n)):
        while re < m and lead[re] <= j:
            re += 1
        if re <= j:
            # nothing left to eliminate with: zero diagonal, caught by the caller
            continue
        ce = j + 1
        for i in range(j, re):
            if last[i] + 1 > ce:
                ce = last[i] + 1
        nrm = 0.0
        for i in range(j, re):
            nrm += A[i, j] * A[i, j]
        nrm = np.sqrt(nrm)
        if nrm == 0.0:
            continue
        x0 = A[j, j]
        alpha = -nrm if x0 >= 0 else nrm
        v0 = x0 - alpha
        vtv = v0 * v0 + (nrm * nrm - x0 * x0)
        if vtv > 0.0:
            for k in range(j + 1, ce):
                s = v0 * A[j, k]
                for i in range(j + 1, re):
                    s += A[i, j] * A[i, k]
                f = 2.0 * s / vtv
                A[j, k] -= f * v0
                for i in range(j + 1, re):
                    A[i, k] -= f * A[i, j]
            s = v0 * b[j]
            for i in range(j + 1, re):
                s += A[i, j] * b[i]
            f = 2.0 * s / vtv
            b[j] -= f * v0
            for i in range(j + 1, re):
                b[i] -= f * A[i, j]
        A[j, j] = alpha
        for i in range(j + 1, re):
            A[i, j] = 0.0
        for i in range(j, re):
            last[i] = ce - 1


@numba.njit(cache=True)
def _givens_fold(R, d, n, row, rhs):
    """Rotate one whitened row into R[:n, :n]; returns the leftover rhs."""
    for j in range(n):
        rj = row[j]
        if rj == 0.0:
            continue
        a = R[j, j]
        r = np.hypot(a, rj)
        c = a / r
        s = rj / r
        for k in range(j, n):
            x = R[j, k]
            y = row[k]
            R[j, k] = c * x + s * y
            row[k] = -s * x + c * y
        x = d[j]
        d[j] = c * x + s * rhs
        rhs = -s * x + c * rhs
        row[j] = 0.0
    return rhs


@numba.njit(cache=True)
def _backsub(R, d, n):
    x = np.zeros(n)
    for i in range(n - 1, -1, -1):
        s = d[i]
        for k in range(i + 1, n):
            s -= R[i, k] * x[k]
        x[i] = s / R[i, i]
    return x


# ----------------------------------------------------------------------------
# square-root information


class SqrtInfo:
    """Upper-triangular R (permuted column order) and rhs d.

    `perm_vars` lists variables in column order; `pos[key]` is a variable's
    first column. Storage is over-allocated so appended variables are cheap.
    """

    def __init__(self, R: np.ndarray, d: np.ndarray, perm_vars: list, sizes: dict, residual_sq: float = 0.0):
        n = R.shape[0]
        cap = max(8, n)
        self._R = np.zeros((cap, cap))
        self._R[:n, :n] = R
        self._d = np.zeros(cap)
        self._d[:n] = d
        self.n = n
        self.perm_vars = list(perm_vars)
        self.sizes = dict(sizes)
        self.pos = {}
        off = 0
        for k in self.perm_vars:
            self.pos[k] = off
            off += self.sizes[k]
        self.residual_sq = float(residual_sq)

    @property
    def R(self) -> np.ndarray:
        return self._R[: self.n, : self.n]

    @property
    def d(self) -> np.ndarray:
        return self._d[: self.n]

    @property
    def variables(self) -> list:
        return list(self.perm_vars)

    def copy(self) -> "SqrtInfo":
        s = SqrtInfo.__new__(SqrtInfo)
        s._R = self._R.copy()
        s._d = self._d.copy()
        s.n = self.n
        s.perm_vars = list(self.perm_vars)
        s.sizes = dict(self.sizes)
        s.pos = dict(self.pos)
        s.residual_sq = self.residual_sq
        return s

    def add_variable(self, key, size: int) -> None:
        if key in self.pos:
            return
        need = self.n + size
        if need > self._R.shape[0]:
            cap = max(need, 2 * self._R.shape[0])
            R = np.zeros((cap, cap))
            R[: self.n, : self.n] = self.R
            d = np.zeros(cap)
            d[: self.n] = self.d
            self._R, self._d = R, d
        self.pos[key] = self.n
        self.sizes[key] = size
        self.perm_vars.append(key)
        self.n = need

    def column_of(self, key, comp: int = 0) -> int:
        return self.pos[key] + comp

    def variable_at(self, col: int):
        for k in self.perm_vars:
            p = self.pos[k]
            if p <= col < p + self.sizes[k]:
                return (k, col - p) if self.sizes[k] > 1 else k
        raise IndexError(col)


def _row_cliques(A: sparse.csr_matrix, col_var: np.ndarray) -> list:
    out = []
    for i in range(A.shape[0]):
        cols = A.indices[A.indptr[i]:A.indptr[i + 1]]
        vals = A.data[A.indptr[i]:A.indptr[i + 1]]
        out.append(np.unique(col_var[cols[vals != 0]]).tolist())
    return out


def qr_factorize(sys: LinearSystem, order: Optional[list] = None) -> SqrtInfo:
    """Householder QR with a fill-reducing block ordering; diag(R) > 0."""
    nv = len(sys.variables)
    if order is None:
        cliques = sys.cliques
        if cliques is None:
            cliques = _row_cliques(sys.A, np.repeat(np.arange(nv), sys.sizes))
        order = min_degree_order(nv, cliques)
    offs = np.cumsum([0] + list(sys.sizes))
    cols = np.concatenate([np.arange(offs[v], offs[v + 1]) for v in order]) if nv else np.zeros(0, int)
    m, n = sys.shape
    dense = sys.dense
    A = np.ascontiguousarray(dense[:, cols]) if n else np.zeros((m, 0))
    nz = A != 0
    lead = np.where(nz.any(axis=1), nz.argmax(axis=1), n)
    ro = np.argsort(lead, kind="stable")
    A = np.ascontiguousarray(A[ro])
    b = sys.b[ro].copy()
    lead = lead[ro].astype(np.int64)
    if m and n:
        _householder_banded(A, b, lead)
    R = np.zeros((n, n))
    k = min(m, n)
    R[:k] = np.triu(A[:k])
    d = np.zeros(n)
    d[:k] = b[:k]
    sgn = np.where(np.diag(R) < 0, -1.0, 1.0)
    R *= sgn[:, None]
    d *= sgn
    perm_vars = [sys.variables[v] for v in order]
    sq = SqrtInfo(R, d, perm_vars, dict(zip(sys.variables, sys.sizes)), float(b[k:] @ b[k:]))
    diag = np.abs(np.diag(R))
    bad = np.flatnonzero(diag < RANK_TOL)
    if len(bad):
        raise RankDeficient(sq.variable_at(int(bad[0])), float(diag[bad[0]]) if n else 0.0)
    return sq


def backsubstitute(sq: SqrtInfo, variables: Optional[list] = None) -> np.ndarray:
    """Solve R x = d; x returned in `variables` order (default: column order)."""
    n = sq.n
    if n == 0:
        return np.zeros(0)
    diag = np.abs(np.diag(sq.R))
    if not np.all(diag > RANK_TOL * max(1.0, diag.max())) or not np.all(np.isfinite(sq.R)):
        raise SingularR("R has a (near) zero diagonal entry")
    x = _backsub(np.ascontiguousarray(sq.R), np.ascontiguousarray(sq.d), n)
    if variables is None:
        return x
    return np.concatenate([x[sq.pos[k]:sq.pos[k] + sq.sizes[k]] for k in variables])


def solution_dict(sq: SqrtInfo) -> dict:
    x = backsubstitute(sq)
    return {k: x[sq.pos[k]:sq.pos[k] + sq.sizes[k]].copy() for k in sq.perm_vars}


def incremental_update(sq: SqrtInfo, rows: np.ndarray, rhs: np.ndarray, row_vars: list, row_sizes: list) -> SqrtInfo:
    """Fold whitened rows (columns laid out as `row_vars`) into sq in place.

    Unknown variables are appended after the existing columns. Only rows of R
    at or after the first touched column change.
    """
    rows = np.atleast_2d(np.asarray(rows, dtype=float))
    rhs = np.asarray(rhs, dtype=float).reshape(-1)
    if not (np.all(np.isfinite(rows)) and np.all(np.isfinite(rhs))):
        raise NonFiniteJacobian("non-finite rows in incremental update")
    for k, s in zip(row_vars, row_sizes):
        sq.add_variable(k, s)
    n = sq.n
    src = np.cumsum([0] + list(row_sizes))
    dst = np.concatenate([np.arange(sq.pos[k], sq.pos[k] + s) for k, s in zip(row_vars, row_sizes)]) \
        if row_vars else np.zeros(0, int)
    full = np.zeros((rows.shape[0], n))
    full[:, dst] = rows[:, : src[-1]]
    for i in range(full.shape[0]):
        left = _givens_fold(sq._R, sq._d, n, full[i], float(rhs[i]))
        sq.residual_sq += left * left
    return sq


def incremental_update_factors(sq: SqrtInfo, factors: Iterable, values: dict, fixed: Optional[set] = None) -> SqrtInfo:
    """Linearize new factors at `values` and fold them in."""
    fixed = fixed or set()
    for f in factors:
        r, Js = f.whitened(values)
        if not (np.all(np.isfinite(r)) and all(np.all(np.isfinite(J)) for J in Js)):
            raise NonFiniteJacobian(f"non-finite linearization of {type(f).__name__} on {f.keys}")
        keys = [k for k in f.keys if k not in fixed]
        blocks = [np.asarray(J, dtype=float).reshape(len(r), -1) for k, J in zip(f.keys, Js) if k not in fixed]
        if not keys:
            continue
        incremental_update(sq, np.hstack(blocks), -np.asarray(r, dtype=float), keys, [b.shape[1] for b in blocks])
    return sq


def dump_matrix_market(prefix, sys: Optional[LinearSystem] = None, sq: Optional[SqrtInfo] = None) -> list:
    """Write A and/or R as MatrixMarket coordinate files; returns written paths."""
    from scipy.io import mmwrite

    out = []
    if sys is not None:
        mmwrite(f"{prefix}_A.mtx", sys.A)
        out.append(f"{prefix}_A.mtx")
    if sq is not None:
        mmwrite(f"{prefix}_R.mtx", sparse.csr_matrix(sq.R))
        out.append(f"{prefix}_R.mtx")
    return out


# ----------------------------------------------------------------------------
# adaptive relinearization


@dataclass
class RelinState:
    delta: float = 0.01  # per-node change threshold, m
    L_T: int = 10
    Delta: float = 0.05  # total change norm threshold, m
    L: set = field(default_factory=set)

    def __post_init__(self):
        if not (self.delta > 0 and self.L_T >= 1 and self.Delta > 0):
            raise ValueError("relinearization thresholds must be positive (L_T >= 1)")


@dataclass
class SolverStats:
    full_updates: int = 0
    incremental_updates: int = 0
    relinearizations: int = 0
    factors_added: int = 0


class IncrementalSolver:
    """Owns factors, linearization points, current estimates and the R factor.

    The linear system is always in the step dx around `lin`; the estimate is
    lin + dx.
    """

    def __init__(self, relin: Optional[RelinState] = None, fixed_values: Optional[dict] = None):
        self.relin = relin or RelinState()
        self.factors: list = []
        self.lin: dict = {}
        self.estimate: dict = {}
        self.fixed = dict(fixed_values or {})
        self.sqrt: Optional[SqrtInfo] = None
        self.stats = SolverStats()

    def _values(self, src: dict) -> dict:
        v = dict(self.fixed)
        v.update(src)
        return v

    def copy(self) -> "IncrementalSolver":
        s = IncrementalSolver(RelinState(self.relin.delta, self.relin.L_T, self.relin.Delta, set(self.relin.L)),
                              self.fixed)
        s.factors = list(self.factors)
        s.lin = {k: v.copy() for k, v in self.lin.items()}
        s.estimate = {k: v.copy() for k, v in self.estimate.items()}
        s.sqrt = None if self.sqrt is None else self.sqrt.copy()
        s.stats = SolverStats(**vars(self.stats))
        return s

    def full_update(self) -> None:
        """Relinearize everything at `lin`, refactorize, back-substitute."""
        sys = linearize(self.factors, self._values(self.lin), set(self.fixed))
        self.sqrt = qr_factorize(sys)
        self._apply_solution()
        self.stats.full_updates += 1

    def _apply_solution(self) -> dict:
        dx = solution_dict(self.sqrt)
        for k, lp in self.lin.items():
            self.estimate[k] = lp + dx[k] if k in dx else lp.copy()
        return dx

    def update(self, new_factors: Sequence = (), new_values: Optional[dict] = None) -> bool:
        """One pass of the adaptive scheme; returns True when a FullUpdate ran."""
        for k, v in (new_values or {}).items():
            self.lin[k] = np.asarray(v, dtype=float).copy()
            self.estimate[k] = self.lin[k].copy()
        new_factors = list(new_factors)
        self.factors.extend(new_factors)
        self.stats.factors_added += len(new_factors)
        if self.sqrt is None:
            self.full_update()
            return True
        incremental_update_factors(self.sqrt, new_factors, self._values(self.lin), set(self.fixed))
        self.stats.incremental_updates += 1
        self._apply_solution()
        return self.check_relin()

    def check_relin(self) -> bool:
        """Flag nodes that moved at least delta; relinearize all when thresholds are hit."""
        keys = list(self.lin)
        diff = np.array([self.estimate[k] - self.lin[k] for k in keys]).reshape(len(keys), -1)
        norms = np.sqrt((diff * diff).sum(axis=1))
        self.relin.L = {k for k, nrm in zip(keys, norms) if nrm >= self.relin.delta}
        total = float(np.sqrt((norms * norms).sum()))
        if len(self.relin.L) >= self.relin.L_T or total >= self.relin.Delta:
            self.relinearize()
            return True
        return False

    def relinearize(self) -> None:
        for k in self.lin:
            self.lin[k] = self.estimate[k].copy()
        self.stats.relinearizations += 1
        self.full_update()
        self.relin.L = set()

    def energy(self, values: Optional[dict] = None) -> float:
        v = self._values(self.estimate if values is None else values)
        return float(sum(f.energy(v) for f in self.factors))


def solve_adaptive(solver: IncrementalSolver, new_factors: Sequence = (), new_values: Optional[dict] = None) -> dict:
    solver.update(new_factors, new_values)
    return solver.estimate
