"""Exact discrete Wasserstein-1 via the transportation simplex.

The solver works on the bipartite transportation polytope. A basis is a
spanning tree over ``m`` row nodes and ``n`` column nodes; node potentials
of the tree are the dual values, so optimal duals come out of the same
pivot loop that produces the plan.

Sign convention for duals: ``u_i - v_j <= |x_i - y_j|`` and
``W1 = sum_i a_i u_i - sum_j b_j v_j``. Duals are gauge-fixed so that
``min_j v_j == 0``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .measures import EmpiricalMeasure

FEAS_TOL = 1e-9
GAP_TOL = 1e-9
SLACK_TOL = 1e-8
SUPPORT_MASS = 1e-12


class SolverError(RuntimeError):
    """The simplex loop failed to terminate; indicates a bug, not bad input."""


@dataclass(frozen=True)
class TransportPlan:
    rows: np.ndarray
    cols: np.ndarray
    mass: np.ndarray
    cost: float
    shape: tuple[int, int]
    iterations: int = 0

    def dense(self) -> np.ndarray:
        out = np.zeros(self.shape)
        np.add.at(out, (self.rows, self.cols), self.mass)
        return out

    def entries(self):
        return list(zip(self.rows.tolist(), self.cols.tolist(), self.mass.tolist()))


@dataclass(frozen=True)
class DualSolution:
    source_values: np.ndarray
    target_values: np.ndarray
    w1: float


def cost_matrix(xs, ys) -> np.ndarray:
    """Pairwise Euclidean distances; long vectors accumulate in extended precision."""
    xs = np.atleast_2d(np.asarray(xs, dtype=float))
    ys = np.atleast_2d(np.asarray(ys, dtype=float))
    if xs.shape[1] != ys.shape[1]:
        raise ValueError(f"dimension mismatch {xs.shape[1]} vs {ys.shape[1]}")
    if xs.shape[1] > 64:
        acc = np.zeros((xs.shape[0], ys.shape[0]), dtype=np.longdouble)
        for k in range(xs.shape[1]):
            diff = xs[:, k, None].astype(np.longdouble) - ys[None, :, k].astype(np.longdouble)
            acc += diff * diff
        return np.sqrt(acc).astype(float)
    diff = xs[:, None, :] - ys[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


class TransportSimplex:
    """Primal network simplex on a dense ``m x n`` transportation problem.

    Entering arcs are priced by Dantzig's rule. After a run of degenerate
    pivots the loop falls back to Bland's rule (lowest flat index enters,
    lowest flat index leaves among ties) until a nondegenerate pivot occurs.
    """

    def __init__(self, supply, demand, cost, max_iter=None):
        self.a = np.asarray(supply, dtype=float)
        self.b = np.asarray(demand, dtype=float)
        self.C = np.asarray(cost, dtype=float)
        self.m, self.n = self.C.shape
        self.scale = max(float(self.C.max(initial=0.0)), 1.0)
        self.max_iter = max_iter or 50 * (self.m + self.n) * max(self.n, 10) + 1000
        self.iterations = 0
        self.flow = np.zeros((self.m, self.n))

    # -- tree bookkeeping -------------------------------------------------
    def _edge(self, child: int):
        """Cell ``(i, j)`` of the tree edge between ``child`` and its parent."""
        p = self.parent[child]
        if child < self.m:
            return child, p - self.m
        return p, child - self.m

    def _initial_basis(self):
        m, n, C = self.m, self.n, self.C
        s, d = self.a.copy(), self.b.copy()
        row_open = np.ones(m, bool)
        col_open = np.ones(n, bool)
        order = np.argsort(C, axis=None, kind="stable")
        edges = []
        left = m
        for flat in order:
            i, j = divmod(int(flat), n)
            if not (row_open[i] and col_open[j]):
                continue
            q = min(s[i], d[j])
            self.flow[i, j] = q
            s[i] -= q
            d[j] -= q
            edges.append((i, j))
            if s[i] <= 0:
                row_open[i] = False
                left -= 1
            elif d[j] <= 0:
                col_open[j] = False
            if left == 0:
                break
        # join the forest into a spanning tree with zero-flow cells
        root = list(range(m + n))

        def find(x):
            while root[x] != x:
                root[x] = root[root[x]]
                x = root[x]
            return x

        for i, j in edges:
            root[find(i)] = find(m + j)
        if len(edges) < m + n - 1:
            for flat in order:
                i, j = divmod(int(flat), n)
                ri, rj = find(i), find(m + j)
                if ri != rj:
                    root[ri] = rj
                    edges.append((i, j))
                    if len(edges) == m + n - 1:
                        break
        return edges

    def _build_tree(self, edges):
        m, n, C = self.m, self.n, self.C
        adj = [[] for _ in range(m + n)]
        for i, j in edges:
            adj[i].append(m + j)
            adj[m + j].append(i)
        N = m + n
        self.parent = [-1] * N
        self.depth = [0] * N
        self.children = [set() for _ in range(N)]
        self.pot = np.zeros(N)
        pot = self.pot
        root = m  # column 0
        seen = [False] * N
        seen[root] = True
        stack = [root]
        while stack:
            x = stack.pop()
            for y in adj[x]:
                if seen[y]:
                    continue
                seen[y] = True
                self.parent[y] = x
                self.depth[y] = self.depth[x] + 1
                self.children[x].add(y)
                if y < m:
                    pot[y] = pot[x] + C[y, x - m]
                else:
                    pot[y] = pot[x] - C[x, y - m]
                stack.append(y)
        if not all(seen):
            raise SolverError("initial basis is not a spanning tree")
        self.root = root

    # -- main loop --------------------------------------------------------
    def solve(self):
        m, n, C = self.m, self.n, self.C
        self._build_tree(self._initial_basis())
        tol = 1e-12 * self.scale
        degenerate_run = 0
        bland = False
        while True:
            if self.iterations >= self.max_iter:
                raise SolverError(f"no convergence after {self.iterations} pivots")
            u = self.pot[:m]
            v = self.pot[m:]
            R = C - u[:, None] + v[None, :]
            if bland:
                neg = np.flatnonzero(R.ravel() < -tol)
                if neg.size == 0:
                    break
                flat = int(neg[0])
            else:
                flat = int(np.argmin(R))
                if R.flat[flat] >= -tol:
                    break
            ie, je = divmod(flat, n)
            theta = self._pivot(ie, je, float(R.flat[flat]))
            self.iterations += 1
            if theta <= 0.0:
                degenerate_run += 1
                if degenerate_run > m + n:
                    bland = True
            else:
                degenerate_run = 0
                bland = False
        return self._finalize()

    def _pivot(self, ie: int, je: int, reduced: float) -> float:
        m, n = self.m, self.n
        parent, depth = self.parent, self.depth
        a_node, b_node = ie, m + je
        side_a, side_b = [], []
        x, y = a_node, b_node
        while x != y:
            if depth[x] >= depth[y]:
                side_a.append(x)
                x = parent[x]
            else:
                side_b.append(y)
                y = parent[y]
        # edges adjacent to either endpoint lose flow, then signs alternate
        minus = side_a[0::2] + side_b[0::2]
        plus = side_a[1::2] + side_b[1::2]
        theta = np.inf
        leave = -1
        leave_key = None
        for c in minus:
            i, j = self._edge(c)
            f = self.flow[i, j]
            key = i * n + j
            if f < theta or (f == theta and key < leave_key):
                theta, leave, leave_key = f, c, key
        for c in minus:
            i, j = self._edge(c)
            self.flow[i, j] -= theta
        for c in plus:
            i, j = self._edge(c)
            self.flow[i, j] += theta
        self.flow[ie, je] = theta
        li, lj = self._edge(leave)
        self.flow[li, lj] = 0.0

        # leave is the lower node of the leaving edge; whichever endpoint of
        # the entering edge sits in its subtree gets re-hung under the other
        if leave in side_a:
            s_in, s_out = a_node, b_node
        else:
            s_in, s_out = b_node, a_node
        path = [s_in]
        while path[-1] != leave:
            path.append(parent[path[-1]])
        self.children[parent[leave]].discard(leave)
        for t in range(len(path) - 1, 0, -1):
            hi, lo = path[t], path[t - 1]
            self.children[hi].discard(lo)
            self.children[lo].add(hi)
            parent[hi] = lo
        parent[s_in] = s_out
        self.children[s_out].add(s_in)

        shift = reduced if s_in < m else -reduced
        pot = self.pot
        stack = [s_in]
        while stack:
            z = stack.pop()
            pot[z] += shift
            depth[z] = depth[parent[z]] + 1
            stack.extend(self.children[z])
        return theta

    def _finalize(self):
        """Recompute tree flows by leaf elimination and potentials from the root."""
        m, n, C = self.m, self.n, self.C
        order = []
        stack = [self.root]
        while stack:
            z = stack.pop()
            order.append(z)
            stack.extend(self.children[z])
        residual = np.concatenate([self.a, self.b])
        flow = np.zeros((m, n))
        for z in reversed(order):
            if z == self.root:
                continue
            f = residual[z]
            i, j = self._edge(z)
            flow[i, j] = f
            residual[self.parent[z]] -= f
        if flow.min(initial=0.0) < -1e-12:
            raise SolverError(f"negative basic flow {flow.min()}")
        np.maximum(flow, 0.0, out=flow)
        pot = np.zeros(m + n)
        for z in order:
            if z == self.root:
                continue
            p = self.parent[z]
            if z < m:
                pot[z] = pot[p] + C[z, p - m]
            else:
                pot[z] = pot[p] - C[p, z - m]
        tree = [self._edge(z) for z in order if z != self.root]
        return flow, pot[:m].copy(), pot[m:].copy(), tree


def _min_ratio_margin(fixed, tied, t_hi):
    """Largest ``t`` for which ``v_a <= v_k + min(fixed, tied - t)`` is feasible.

    Both arguments are ``n x n`` edge-weight matrices (``inf`` = no edge),
    indexed ``[k, a]`` for the constraint ``v_a <= v_k + w``. Returns the
    margin and the potentials realizing half of it.
    """
    n = fixed.shape[0]

    def shortest(t):
        D = np.minimum(fixed, tied - t)
        np.fill_diagonal(D, np.minimum(np.diag(D), 0.0))
        for k in range(n):
            np.minimum(D, D[:, k, None] + D[None, k, :], out=D)
        return D

    scale = max(1.0, float(np.max(np.abs(tied[np.isfinite(tied)]), initial=1.0)))
    neg = -1e-12 * scale

    def feasible(t):
        return np.all(np.diag(shortest(t)) >= neg)

    if not feasible(0.0):
        return 0.0, None
    lo, hi = 0.0, t_hi
    if feasible(hi):
        lo = hi
    else:
        for _ in range(60):
            mid = 0.5 * (lo + hi)
            if feasible(mid):
                lo = mid
            else:
                hi = mid
    D = shortest(0.5 * lo)
    v = np.minimum(0.0, D.min(axis=0))
    return lo, v


def center_duals(C, flow, a, b):
    """Re-pick target duals so every arc outside the plan support is strictly slack.

    Among all optimal duals complementary to ``flow`` this maximizes the
    smallest slack on non-support arcs (then backs off to half of it). If the
    plan is not the unique optimum the margin is zero and ``None`` is
    returned, meaning the caller should keep its duals.
    """
    m, n = C.shape
    support = flow > SUPPORT_MASS
    fixed = np.full((n, n), np.inf)
    tied = np.full((n, n), np.inf)
    has = support.any(axis=1)
    sigma = np.argmax(support, axis=1)
    rows = np.flatnonzero(has)
    base = C[rows, sigma[rows]]
    slack = C[rows] - base[:, None]  # v_sigma - v_k <= slack[i, k] on non-support
    sup_rows = support[rows]
    for a_idx in np.unique(sigma[rows]):
        sel = sigma[rows] == a_idx
        s = np.where(sup_rows[sel], np.inf, slack[sel])
        tied[:, a_idx] = np.minimum(tied[:, a_idx], s.min(axis=0))
    split = np.flatnonzero(sup_rows.sum(axis=1) > 1)
    for r in split:
        i = rows[r]
        s_atom = sigma[i]
        for k in np.flatnonzero(support[i]):
            if k == s_atom:
                continue
            e = C[i, s_atom] - C[i, k]  # v_k - v_sigma == e
            fixed[s_atom, k] = min(fixed[s_atom, k], e)
            fixed[k, s_atom] = min(fixed[k, s_atom], -e)
    np.fill_diagonal(tied, np.inf)
    finite = tied[np.isfinite(tied)]
    if finite.size == 0:
        return None
    t_hi = float(finite.max()) + 1.0
    margin, v = _min_ratio_margin(fixed, tied, t_hi)
    if v is None or margin <= 1e-12 * max(1.0, float(C.max())):
        return None
    u = (v[None, :] + C).min(axis=1)
    # verify complementary slackness before accepting
    r, c = np.nonzero(support)
    if r.size and np.max(np.abs(u[r] - v[c] - C[r, c])) > 1e-10 * max(1.0, float(C.max())):
        return None
    return u, v


def solve_w1(mu: EmpiricalMeasure, nu: EmpiricalMeasure, *, center: bool = True):
    """Exact W1 between two empirical measures.

    Returns ``(TransportPlan, DualSolution)``. With ``center`` the duals are
    moved to the interior of the optimal dual face whenever the plan is the
    unique optimum, so source points outside the plan support of an atom are
    never tied for it.
    """
    if mu.dim != nu.dim:
        raise ValueError(f"dimension mismatch {mu.dim} vs {nu.dim}")
    C = cost_matrix(mu.points, nu.points)
    a = mu.weights.copy()
    b = nu.weights * (a.sum() / nu.weights.sum())
    solver = TransportSimplex(a, b, C)
    flow, u, v, _ = solver.solve()
    if center and C.shape[1] <= 200:
        centered = center_duals(C, flow, a, b)
        if centered is not None:
            u, v = centered
    shift = v.min()
    u = u - shift
    v = v - shift
    r, c = np.nonzero(flow > 1e-15)
    mass = flow[r, c]
    cost = float(np.dot(mass, C[r, c]))
    plan = TransportPlan(r, c, mass, cost, C.shape, solver.iterations)
    w1 = float(np.dot(mu.weights, u) - np.dot(nu.weights, v))
    return plan, DualSolution(u, v, w1)


def w1_distance(mu: EmpiricalMeasure, nu: EmpiricalMeasure) -> float:
    plan, _ = solve_w1(mu, nu, center=False)
    return plan.cost


def hungarian_oracle(mu: EmpiricalMeasure, nu: EmpiricalMeasure) -> float:
    """Min-cost perfect matching value divided by ``n``.

    Uniform weights and equal counts only. Up to 8 atoms every permutation
    is enumerated; up to 12 the Hungarian method is used.
    """
    n = len(mu)
    if len(nu) != n:
        raise ValueError("oracle needs equal atom counts")
    if n > 12:
        raise ValueError("oracle is limited to n <= 12")
    for m in (mu, nu):
        if np.max(np.abs(m.weights - 1.0 / n)) > 1e-12:
            raise ValueError("oracle needs uniform weights")
    C = cost_matrix(mu.points, nu.points)
    if n <= 8:
        perms = np.array(list(itertools.permutations(range(n))))
        totals = C[np.arange(n), perms].sum(axis=1)
        return float(totals.min() / n)
    r, c = linear_sum_assignment(C)
    return float(C[r, c].sum() / n)


@dataclass
class DualReport:
    feasibility: float
    duality_gap: float
    slackness: float
    row_error: float
    col_error: float
    worst_slack_entry: tuple[int, int] | None = None
    passed: bool = field(default=False)


def validate_duals(plan: TransportPlan, duals: DualSolution, mu, nu) -> DualReport:
    """Certify a primal/dual pair: feasibility, strong duality and slackness."""
    C = cost_matrix(mu.points, nu.points)
    u, v = duals.source_values, duals.target_values
    feas = float(np.max(u[:, None] - v[None, :] - C))
    dual_obj = float(np.dot(mu.weights, u) - np.dot(nu.weights, v))
    primal = float(np.dot(plan.mass, C[plan.rows, plan.cols]))
    gap = abs(dual_obj - primal)
    pos = plan.mass > SUPPORT_MASS
    dev = np.abs(u[plan.rows] - v[plan.cols] - C[plan.rows, plan.cols])
    dev = np.where(pos, dev, 0.0)
    slack = float(dev.max(initial=0.0))
    worst = None
    if slack > SLACK_TOL:
        k = int(np.argmax(dev))
        worst = (int(plan.rows[k]), int(plan.cols[k]))
    dense = plan.dense()
    row_err = float(np.max(np.abs(dense.sum(axis=1) - mu.weights)))
    col_err = float(np.max(np.abs(dense.sum(axis=0) - nu.weights)))
    ok = (
        max(feas, 0.0) <= FEAS_TOL
        and gap <= GAP_TOL * max(1.0, abs(primal))
        and slack <= SLACK_TOL
        and row_err <= 1e-9
        and col_err <= 1e-9
    )
    return DualReport(max(feas, 0.0), gap, slack, row_err, col_err, worst, ok)
