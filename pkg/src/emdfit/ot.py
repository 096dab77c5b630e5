"""Exact and entropic solvers for discrete optimal transport.

`exact_emd` runs a transportation simplex (min-cost flow on the bipartite
graph of source and target points) and certifies its optimum through the
dual potentials it maintains.  `emd_1d` is an independent closed-form check
for one-dimensional inputs, and `sinkhorn_emd` is the entropic-regularized
baseline, run in the log domain so small regularization strengths do not
underflow.

All solvers are balanced: weights are normalized to total mass 1 before
solving, and zero-weight points are dropped (they carry no mass, so the
optimum is unchanged).
"""

from dataclasses import dataclass

import numpy as np

from .errors import InputError, NumericalError


@dataclass(frozen=True)
class DiscreteMeasure:
    """Non-negative weights on a finite set of points in R^d."""

    weights: np.ndarray  # (n,)
    points: np.ndarray   # (n, d)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        x = np.asarray(self.points, dtype=np.float64)
        if x.ndim == 1:
            x = x[:, None]
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "points", x)
        if w.ndim != 1 or x.ndim != 2 or len(w) != len(x) or len(w) < 1:
            raise InputError("measure needs matching weights (n,) and points (n, d)")
        if not np.all(np.isfinite(w)) or not np.all(np.isfinite(x)):
            raise InputError("measure contains non-finite entries")
        if np.any(w < 0):
            raise InputError("weights must be non-negative")
        if w.sum() <= 0:
            raise InputError("total weight must be positive")

    @property
    def dim(self):
        return self.points.shape[1]

    def __len__(self):
        return len(self.weights)

    def normalized(self):
        return DiscreteMeasure(self.weights / self.weights.sum(), self.points)


@dataclass(frozen=True)
class TransportPlan:
    """A coupling gamma >= 0 with its transport cost.

    Marginals match the (normalized) input weights and the cost equals
    sum(gamma * C); `validate` asserts both.
    """

    gamma: np.ndarray  # (n, m)
    cost: float

    def validate(self, source, target, rel=1e-8):
        a = source.weights / source.weights.sum()
        b = target.weights / target.weights.sum()
        if np.any(self.gamma < -1e-15):
            raise NumericalError("negative mass in transport plan")
        row_err = np.max(np.abs(self.gamma.sum(axis=1) - a))
        col_err = np.max(np.abs(self.gamma.sum(axis=0) - b))
        if row_err > rel or col_err > rel:
            raise NumericalError(
                f"plan marginals off by {max(row_err, col_err):.3e}")
        c = float(np.sum(self.gamma * cost_matrix(source, target)))
        if abs(c - self.cost) > 1e-10 * max(1.0, abs(self.cost)):
            raise NumericalError("plan cost inconsistent with its coupling")


def cost_matrix(P, Q):
    """Pairwise Euclidean ground costs C[i, j] = ||x_i - y_j||_2."""
    if P.dim != Q.dim:
        raise InputError(f"dimension mismatch: {P.dim} vs {Q.dim}")
    diff = P.points[:, None, :] - Q.points[None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=2))


# ---------------------------------------------------------------------------
# transportation simplex
# ---------------------------------------------------------------------------

_RC_TOL = 1e-11


def _northwest_corner(a, b):
    """Initial basic feasible solution with exactly n+m-1 basic cells."""
    n, m = len(a), len(b)
    ra, rb = a.copy(), b.copy()
    flow = np.zeros((n, m))
    basis = []
    i = j = 0
    while True:
        t = min(ra[i], rb[j])
        flow[i, j] = t
        basis.append((i, j))
        ra[i] -= t
        rb[j] -= t
        if i == n - 1 and j == m - 1:
            break
        if j == m - 1:
            i += 1
        elif i == n - 1:
            j += 1
        elif ra[i] <= rb[j]:
            i += 1
        else:
            j += 1
    return flow, basis


def _tree_duals(n, m, basis_cells, C):
    """Solve u_i + v_j = C_ij on the spanning tree of basic cells."""
    row_adj = [[] for _ in range(n)]
    col_adj = [[] for _ in range(m)]
    for (i, j) in basis_cells:
        row_adj[i].append(j)
        col_adj[j].append(i)
    u = np.full(n, np.nan)
    v = np.full(m, np.nan)
    u[0] = 0.0
    stack = [("r", 0)]
    while stack:
        kind, k = stack.pop()
        if kind == "r":
            for j in row_adj[k]:
                if np.isnan(v[j]):
                    v[j] = C[k, j] - u[k]
                    stack.append(("c", j))
        else:
            for i in col_adj[k]:
                if np.isnan(u[i]):
                    u[i] = C[i, k] - v[k]
                    stack.append(("r", i))
    if np.any(np.isnan(u)) or np.any(np.isnan(v)):
        raise NumericalError("basis lost connectivity (solver bug)")
    return u, v


def _basis_cycle(entering, basis_cells, n, m):
    """Split the unique cycle closed by the entering cell into the cells that
    lose flow (odd positions) and those that gain it (even positions)."""
    ei, ej = entering
    row_adj = [[] for _ in range(n)]
    col_adj = [[] for _ in range(m)]
    for (i, j) in basis_cells:
        row_adj[i].append(j)
        col_adj[j].append(i)
    # path from row node ei to column node ej through the basis tree
    parent = {("r", ei): None}
    stack = [("r", ei)]
    goal = ("c", ej)
    while stack and goal not in parent:
        node = stack.pop()
        kind, k = node
        nbrs = (("c", j) for j in row_adj[k]) if kind == "r" else \
               (("r", i) for i in col_adj[k])
        for nxt in nbrs:
            if nxt not in parent:
                parent[nxt] = node
                stack.append(nxt)
    if goal not in parent:
        raise NumericalError("entering cell closes no cycle (solver bug)")
    path = [goal]
    while parent[path[-1]] is not None:
        path.append(parent[path[-1]])
    path.reverse()  # row ei ... col ej, alternating node kinds
    cells = []
    for u_node, v_node in zip(path[:-1], path[1:]):
        (k1, a1), (k2, a2) = u_node, v_node
        cells.append((a1, a2) if k1 == "r" else (a2, a1))
    return cells[0::2], cells[1::2]


def _transportation_simplex(a, b, C, max_pivots=None):
    """Exact min-cost transport of a onto b.

    Entering variables are picked by most-negative reduced cost; after a run
    of degenerate pivots the rule switches to Bland's smallest-index choice,
    whose termination guarantee rules out cycling.
    """
    n, m = C.shape
    flow, basis = _northwest_corner(a, b)
    in_basis = np.zeros((n, m), dtype=bool)
    for c in basis:
        in_basis[c] = True
    if max_pivots is None:
        max_pivots = 1000 + 20 * n * m
    degenerate_streak = 0
    bland = False
    for _ in range(max_pivots):
        u, v = _tree_duals(n, m, basis, C)
        rc = C - u[:, None] - v[None, :]
        rc[in_basis] = 0.0
        if bland:
            neg = np.flatnonzero(rc.ravel() < -_RC_TOL)
            if neg.size == 0:
                return flow, u, v
            flat = int(neg[0])
        else:
            flat = int(np.argmin(rc))
            if rc.ravel()[flat] >= -_RC_TOL:
                return flow, u, v
        entering = (flat // m, flat % m)
        minus_cells, plus_cells = _basis_cycle(entering, basis, n, m)
        theta = min(flow[c] for c in minus_cells)
        leaving = min(c for c in minus_cells if flow[c] <= theta)
        for c in minus_cells:
            flow[c] -= theta
        for c in plus_cells:
            flow[c] += theta
        flow[entering] += theta
        flow[leaving] = 0.0
        in_basis[entering] = True
        in_basis[leaving] = False
        basis.append(entering)
        basis.remove(leaving)
        if theta <= 1e-15:
            degenerate_streak += 1
            if degenerate_streak > n + m:
                bland = True
        else:
            degenerate_streak = 0
    raise NumericalError("transportation simplex exceeded pivot limit")


def exact_emd(P, Q):
    """Optimal transport plan between normalized measures, with certificate.

    The returned plan's marginals are the normalized weights.  Optimality is
    verified by complementary slackness: every reduced cost against the
    solver's dual potentials must be non-negative and the dual objective must
    equal the primal cost.
    """
    C_full = cost_matrix(P, Q)
    a_full = P.weights / P.weights.sum()
    b_full = Q.weights / Q.weights.sum()
    ia = np.flatnonzero(a_full > 0)
    ib = np.flatnonzero(b_full > 0)
    a, b, C = a_full[ia], b_full[ib], C_full[np.ix_(ia, ib)]
    flow, u, v = _transportation_simplex(a, b, C)
    cost = float(np.sum(flow * C))
    rc_min = float(np.min(C - u[:, None] - v[None, :]))
    dual_value = float(a @ u + b @ v)
    if rc_min < -1e-8 or abs(dual_value - cost) > 1e-8 * max(1.0, cost):
        raise NumericalError(
            f"optimality certificate failed (min reduced cost {rc_min:.3e}, "
            f"duality gap {dual_value - cost:.3e})")
    gamma = np.zeros_like(C_full)
    gamma[np.ix_(ia, ib)] = flow
    return TransportPlan(gamma=gamma, cost=cost)


def emd_1d(P, Q):
    """Exact 1-d Wasserstein-1 via the CDF identity on the merged grid."""
    if P.dim != 1 or Q.dim != 1:
        raise InputError("emd_1d requires one-dimensional measures")
    a = P.weights / P.weights.sum()
    b = Q.weights / Q.weights.sum()
    x = P.points[:, 0]
    y = Q.points[:, 0]
    ts = np.unique(np.concatenate([x, y]))
    xi = np.argsort(x, kind="stable")
    yi = np.argsort(y, kind="stable")
    xs, aw = x[xi], np.cumsum(a[xi])
    ys, bw = y[yi], np.cumsum(b[yi])
    # right-continuous CDFs evaluated at each breakpoint
    Fp = np.concatenate([[0.0], aw])[np.searchsorted(xs, ts, side="right")]
    Fq = np.concatenate([[0.0], bw])[np.searchsorted(ys, ts, side="right")]
    return float(np.sum(np.abs(Fp - Fq)[:-1] * np.diff(ts)))


# ---------------------------------------------------------------------------
# entropic regularization
# ---------------------------------------------------------------------------

def _logsumexp(M, axis):
    mx = np.max(M, axis=axis, keepdims=True)
    return (mx + np.log(np.sum(np.exp(M - mx), axis=axis, keepdims=True))) \
        .squeeze(axis)


def sinkhorn_emd(P, Q, epsilon, max_iters=100_000, tol=1e-9, method="log"):
    """Entropic-regularized transport cost (transport term only).

    Alternating scaling iterations run until the worst marginal violation of
    the implied coupling drops below `tol` or `max_iters` is reached.
    Returns (value, iterations_used).  The default log-domain form is stable
    for any epsilon; the textbook kernel form is kept as `method="kernel"`
    and raises when exp(-C/epsilon) underflows.
    """
    if epsilon <= 0:
        raise InputError("epsilon must be positive")
    a = P.weights / P.weights.sum()
    b = Q.weights / Q.weights.sum()
    C = cost_matrix(P, Q)
    ia = np.flatnonzero(a > 0)
    ib = np.flatnonzero(b > 0)
    a, b, C = a[ia], b[ib], C[np.ix_(ia, ib)]

    if method == "kernel":
        K = np.exp(-C / epsilon)
        if np.any(K.sum(axis=1) == 0.0) or np.any(K.sum(axis=0) == 0.0):
            raise NumericalError(
                "kernel exp(-C/epsilon) underflowed; increase epsilon or use "
                "the log-domain method")
        uvec = np.ones_like(a)
        it = 0
        for it in range(1, max_iters + 1):
            vvec = b / (K.T @ uvec)
            uvec = a / (K @ vvec)
            if not (np.all(np.isfinite(uvec)) and np.all(np.isfinite(vvec))):
                raise NumericalError(
                    "Sinkhorn scaling underflowed; increase epsilon or use "
                    "the log-domain method")
            if it % 10 == 0 or it == max_iters:
                gamma = uvec[:, None] * K * vvec[None, :]
                err = max(np.max(np.abs(gamma.sum(axis=1) - a)),
                          np.max(np.abs(gamma.sum(axis=0) - b)))
                if err < tol:
                    break
        gamma = uvec[:, None] * K * vvec[None, :]
        return float(np.sum(gamma * C)), it

    if method != "log":
        raise InputError(f"unknown sinkhorn method {method!r}")

    loga = np.log(a)
    logb = np.log(b)
    f = np.zeros_like(a)
    g = np.zeros_like(b)
    it = 0
    for it in range(1, max_iters + 1):
        f = -epsilon * _logsumexp((g[None, :] - C) / epsilon + logb[None, :],
                                  axis=1)
        g = -epsilon * _logsumexp((f[:, None] - C) / epsilon + loga[:, None],
                                  axis=0)
        if it % 10 == 0 or it == max_iters:
            log_gamma = (f[:, None] + g[None, :] - C) / epsilon \
                + loga[:, None] + logb[None, :]
            gamma = np.exp(log_gamma)
            err = max(np.max(np.abs(gamma.sum(axis=1) - a)),
                      np.max(np.abs(gamma.sum(axis=0) - b)))
            if err < tol:
                break
    log_gamma = (f[:, None] + g[None, :] - C) / epsilon \
        + loga[:, None] + logb[None, :]
    gamma = np.exp(log_gamma)
    return float(np.sum(gamma * C)), it
