"""Exact solvers for the unregularized transportation problem."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from ._accel import njit

__all__ = ["SparsePlan", "SimplexResult", "northwest_corner", "nw_monotone_1d", "transportation_simplex"]

BALANCE_TOL = 1e-12


@dataclass(frozen=True)
class SparsePlan:
    rows: np.ndarray
    cols: np.ndarray
    mass: np.ndarray
    shape: tuple

    def dense(self) -> np.ndarray:
        out = np.zeros(self.shape)
        np.add.at(out, (self.rows, self.cols), self.mass)
        return out

    def cost(self, C) -> float:
        C = np.asarray(C, dtype=float)
        return float(np.sum(self.mass * C[self.rows, self.cols]))


@dataclass(frozen=True)
class SimplexResult:
    plan: np.ndarray
    value: float
    u: np.ndarray
    v: np.ndarray
    min_reduced_cost: float
    pivots: int
    basis: SparsePlan

    @property
    def optimal(self) -> bool:
        scale = max(1.0, float(np.max(np.abs(self.u), initial=0.0)), float(np.max(np.abs(self.v), initial=0.0)))
        return self.min_reduced_cost >= -1e-9 * scale


def northwest_corner(mu1, mu2) -> SparsePlan:
    """Northwest-corner basis with ``m + n - 1`` cells (zero-mass cells kept).

    On an exact mass tie the row is consumed first.
    """
    a = np.array(mu1, dtype=float)
    b = np.array(mu2, dtype=float)
    m, n = a.size, b.size
    rows = np.empty(m + n - 1, dtype=np.int64)
    cols = np.empty(m + n - 1, dtype=np.int64)
    mass = np.empty(m + n - 1)
    i = j = 0
    for k in range(m + n - 1):
        x = min(a[i], b[j])
        rows[k], cols[k], mass[k] = i, j, x
        a[i] -= x
        b[j] -= x
        if i == m - 1:
            j += 1
        elif j == n - 1:
            i += 1
        elif a[i] <= b[j]:
            i += 1
        else:
            j += 1
    return SparsePlan(rows, cols, mass, (m, n))


def _check_balanced(mu1, mu2):
    mu1 = np.asarray(mu1, dtype=float).ravel()
    mu2 = np.asarray(mu2, dtype=float).ravel()
    if mu1.size == 0 or mu2.size == 0:
        raise ValueError("marginals must be nonempty")
    if np.any(mu1 < 0) or np.any(mu2 < 0):
        raise ValueError("marginals must be nonnegative")
    if abs(mu1.sum() - mu2.sum()) > BALANCE_TOL * max(1.0, mu1.sum()):
        raise ValueError(f"unbalanced marginals: {mu1.sum()!r} vs {mu2.sum()!r}")
    return mu1, mu2


def nw_monotone_1d(mu1, mu2, x=None, y=None, h=None):
    """Monotone (northwest-corner) coupling of two 1-D discrete measures.

    ``x`` and ``y`` are the sorted support points. This coupling is optimal
    for every cost ``h(x - y)`` with ``h`` convex. Returns ``(plan, value)``;
    ``value`` is ``None`` unless ``h`` is given.
    """
    mu1, mu2 = _check_balanced(mu1, mu2)
    for pts, name in ((x, "x"), (y, "y")):
        if pts is not None and np.any(np.diff(np.asarray(pts, dtype=float)) < 0):
            raise ValueError(f"support points {name} must be sorted")
    plan = northwest_corner(mu1, mu2)
    keep = plan.mass > 0
    plan = SparsePlan(plan.rows[keep], plan.cols[keep], plan.mass[keep], plan.shape)
    value = None
    if h is not None:
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        value = float(np.sum(plan.mass * h(x[plan.rows] - y[plan.cols])))
    return plan, value


# --- transportation simplex ---------------------------------------------------

@njit(cache=True)
def _tree_potentials(m, n, brow, bcol, C, u, v, parent, parent_cell, order):
    """Potentials ``u_i + v_j = c_ij`` on the basis tree rooted at row 0.

    Nodes ``0..m-1`` are rows, ``m..m+n-1`` columns. Fills ``parent``
    (node index, -1 at the root) and ``parent_cell`` (basis slot to parent).
    """
    nb = brow.shape[0]
    N = m + n
    deg = np.zeros(N + 1, dtype=np.int64)
    for k in range(nb):
        deg[brow[k] + 1] += 1
        deg[m + bcol[k] + 1] += 1
    for a in range(N):
        deg[a + 1] += deg[a]
    adj = np.empty(2 * nb, dtype=np.int64)
    fill = deg[:N].copy()
    for k in range(nb):
        adj[fill[brow[k]]] = k
        fill[brow[k]] += 1
        adj[fill[m + bcol[k]]] = k
        fill[m + bcol[k]] += 1
    for a in range(N):
        parent[a] = -2
    parent[0] = -1
    parent_cell[0] = -1
    u[0] = 0.0
    order[0] = 0
    head = 0
    tail = 1
    while head < tail:
        a = order[head]
        head += 1
        for s in range(deg[a], deg[a + 1]):
            k = adj[s]
            if a < m:
                b = m + bcol[k]
            else:
                b = brow[k]
            if parent[b] != -2:
                continue
            parent[b] = a
            parent_cell[b] = k
            if b >= m:
                v[b - m] = C[brow[k], bcol[k]] - u[a]
            else:
                u[b] = C[brow[k], bcol[k]] - v[a - m]
            order[tail] = b
            tail += 1
    return tail


@njit(cache=True)
def _entering_nb(C, u, v, tol):
    m, n = C.shape
    for i in range(m):
        for j in range(n):
            if C[i, j] - u[i] - v[j] < -tol:
                return i, j
    return -1, -1


def _entering_np(C, u, v, tol):
    d = C - u[:, None] - v[None, :]
    hits = np.flatnonzero(d < -tol)
    if hits.size == 0:
        return -1, -1
    return divmod(int(hits[0]), C.shape[1])


@njit(cache=True)
def _depth(parent, node):
    d = 0
    while parent[node] >= 0:
        node = parent[node]
        d += 1
    return d


def _make_pivot_loop(entering, tree_potentials, depth):
    def pivot_loop(C, brow, bcol, flow, tol, max_pivots):
        m, n = C.shape
        N = m + n
        u = np.zeros(m)
        v = np.zeros(n)
        parent = np.empty(N, dtype=np.int64)
        parent_cell = np.empty(N, dtype=np.int64)
        order = np.empty(N, dtype=np.int64)
        # scratch for the cycle: basis slots and their signs
        cyc = np.empty(N, dtype=np.int64)
        sgn = np.empty(N, dtype=np.int64)
        pivots = 0
        while pivots < max_pivots:
            tree_potentials(m, n, brow, bcol, C, u, v, parent, parent_cell, order)
            ei, ej = entering(C, u, v, tol)
            if ei < 0:
                return pivots, u, v, 0
            # path row ei -> ... -> col ej through the tree; cycle = entering cell + path
            a = ei
            b = m + ej
            da = depth(parent, a)
            db = depth(parent, b)
            na = 0
            nb_ = 0
            left = np.empty(N, dtype=np.int64)
            right = np.empty(N, dtype=np.int64)
            while da > db:
                left[na] = parent_cell[a]
                na += 1
                a = parent[a]
                da -= 1
            while db > da:
                right[nb_] = parent_cell[b]
                nb_ += 1
                b = parent[b]
                db -= 1
            while a != b:
                left[na] = parent_cell[a]
                na += 1
                a = parent[a]
                right[nb_] = parent_cell[b]
                nb_ += 1
                b = parent[b]
            # walk: (ei,ej) +, then from col ej back to row ei alternating -, +, ...
            L = 0
            for s in range(nb_):
                cyc[L] = right[s]
                L += 1
            for s in range(na - 1, -1, -1):
                cyc[L] = left[s]
                L += 1
            for s in range(L):
                sgn[s] = -1 if s % 2 == 0 else 1
            theta = np.inf
            leave = -1
            for s in range(L):
                if sgn[s] < 0:
                    k = cyc[s]
                    f = flow[k]
                    key = brow[k] * n + bcol[k]
                    if f < theta or (f == theta and key < brow[leave] * n + bcol[leave]):
                        theta = f
                        leave = k
            for s in range(L):
                flow[cyc[s]] += sgn[s] * theta
            brow[leave] = ei
            bcol[leave] = ej
            flow[leave] = theta
            pivots += 1
        return pivots, u, v, 1

    return pivot_loop


_pivot_loop_nb = njit(cache=False)(_make_pivot_loop(_entering_nb, _tree_potentials, _depth)) if kernels.USE_NUMBA else None
_pivot_loop_py = _make_pivot_loop(
    _entering_np,
    getattr(_tree_potentials, "py_func", _tree_potentials),
    getattr(_depth, "py_func", _depth),
)


def transportation_simplex(mu1, mu2, C, max_pivots: int = 10_000_000, use_numba=None) -> SimplexResult:
    """Exact optimum of the balanced transportation LP.

    Network simplex on the bipartite basis tree: northwest-corner start,
    Bland's rule for the entering cell (first negative reduced cost in
    row-major order) and for the leaving cell (smallest index among ties).
    """
    mu1, mu2 = _check_balanced(mu1, mu2)
    C = np.ascontiguousarray(C, dtype=float)
    if C.shape != (mu1.size, mu2.size):
        raise ValueError(f"cost shape {C.shape} does not match marginals {(mu1.size, mu2.size)}")
    if not np.all(np.isfinite(C)):
        raise ValueError("costs must be finite")
    start = northwest_corner(mu1, mu2)
    brow = start.rows.copy()
    bcol = start.cols.copy()
    flow = start.mass.copy()
    tol = 1e-12 * max(1.0, float(np.max(np.abs(C))))
    use_numba = kernels.USE_NUMBA if use_numba is None else (use_numba and kernels.USE_NUMBA)
    loop = _pivot_loop_nb if use_numba else _pivot_loop_py
    pivots, u, v, status = loop(C, brow, bcol, flow, tol, max_pivots)
    if status != 0:
        raise RuntimeError(f"transportation simplex hit the pivot cap ({max_pivots})")
    flow = np.maximum(flow, 0.0)
    basis = SparsePlan(brow, bcol, flow, C.shape)
    plan = basis.dense()
    reduced = C - u[:, None] - v[None, :]
    return SimplexResult(
        plan=plan,
        value=basis.cost(C),
        u=u,
        v=v,
        min_reduced_cost=float(reduced.min()),
        pivots=int(pivots),
        basis=basis,
    )
