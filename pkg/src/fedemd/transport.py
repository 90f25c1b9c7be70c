"""Discrete optimal transport: ground costs, exact EMD and Sinkhorn.

All solvers work on empirical distributions (a point cloud plus a probability
vector) and report the transport cost of the returned coupling, so the exact
and entropic backends produce values on the same scale.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from numba import njit
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist
from scipy.special import logsumexp

from ._validation import DimensionMismatchError, ValidationError, as_matrix

logger = logging.getLogger(__name__)

WEIGHT_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class DiscreteDistribution:
    """Point matrix ``points`` (n x d) with probability weights ``weights`` (n,)."""

    points: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        points = as_matrix(self.points, "points")
        weights = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        if weights.shape[0] != points.shape[0]:
            raise DimensionMismatchError(
                f"{points.shape[0]} points but {weights.shape[0]} weights"
            )
        if not np.all(np.isfinite(weights)) or np.any(weights < 0):
            raise ValidationError("weights must be finite and non-negative")
        if abs(weights.sum() - 1.0) > WEIGHT_TOL:
            raise ValidationError(f"weights sum to {weights.sum():.12g}, expected 1")
        object.__setattr__(self, "points", points)
        object.__setattr__(self, "weights", weights)

    @classmethod
    def uniform(cls, points) -> "DiscreteDistribution":
        points = as_matrix(points, "points")
        n = points.shape[0]
        return cls(points, np.full(n, 1.0 / n))

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @property
    def is_uniform(self) -> bool:
        return bool(np.all(self.weights == self.weights[0]))


@dataclass(frozen=True, eq=False)
class TransportPlan:
    coupling: np.ndarray
    value: float
    converged: bool = True
    n_iter: int = 0

    def marginal_error(self, a: DiscreteDistribution, b: DiscreteDistribution) -> float:
        rows = np.abs(self.coupling.sum(axis=1) - a.weights).max()
        cols = np.abs(self.coupling.sum(axis=0) - b.weights).max()
        return float(max(rows, cols))

    def to_dict(self) -> dict:
        return {
            "value": float(self.value),
            "converged": bool(self.converged),
            "n_iter": int(self.n_iter),
            "coupling": self.coupling.tolist(),
        }


def cost_matrix(a: DiscreteDistribution, b: DiscreteDistribution) -> np.ndarray:
    """Pairwise Euclidean distances between the support points of ``a`` and ``b``."""
    if a.dim != b.dim:
        raise DimensionMismatchError(
            f"cannot compare {a.dim}-dimensional and {b.dim}-dimensional points"
        )
    return cdist(a.points, b.points)


def _check_problem(a, b, C) -> np.ndarray:
    C = np.asarray(C, dtype=np.float64)
    if C.shape != (a.n, b.n):
        raise DimensionMismatchError(f"cost matrix shape {C.shape} != ({a.n}, {b.n})")
    if not np.all(np.isfinite(C)) or np.any(C < 0):
        raise ValidationError("costs must be finite and non-negative")
    return C


def _principal_order(a: DiscreteDistribution, b: DiscreteDistribution):
    """Sort both supports along their joint leading principal axis.

    Used only to warm-start the simplex: in 1-D this makes the initial
    staircase plan optimal, and in higher dimensions it is usually close.
    """
    pts = np.vstack([a.points, b.points])
    centred = pts - pts.mean(axis=0)
    if a.dim == 1:
        axis = np.ones(1)
    else:
        _, _, vt = np.linalg.svd(centred, full_matrices=False)
        axis = vt[0]
    return (
        np.argsort(a.points @ axis, kind="stable"),
        np.argsort(b.points @ axis, kind="stable"),
    )


@njit(cache=True)
def _simplex_kernel(supply, demand, C, max_pivots):  # pragma: no cover - jitted
    """Transportation simplex on a bipartite spanning-tree basis.

    Rows are nodes ``0..n-1`` and columns nodes ``n..n+m-1``. The initial
    basis is the northwest-corner staircase (exactly n + m - 1 arcs, so
    degenerate zero-flow arcs stay in the tree). Each pivot rebuilds the node
    potentials from the tree and enters the most negative reduced cost.
    """
    n, m = C.shape
    N = n + m
    flow = np.zeros((n, m))
    adj = np.empty((N, N), np.int64)
    deg = np.zeros(N, np.int64)

    rs = supply.copy()
    rd = demand.copy()
    i = 0
    j = 0
    while True:
        q = min(rs[i], rd[j])
        flow[i, j] = q
        adj[i, deg[i]] = n + j
        deg[i] += 1
        adj[n + j, deg[n + j]] = i
        deg[n + j] += 1
        rs[i] -= q
        rd[j] -= q
        if i == n - 1 and j == m - 1:
            break
        if j == m - 1 or (i < n - 1 and rs[i] <= rd[j]):
            i += 1
        else:
            j += 1

    cmax = 0.0
    for i in range(n):
        for j in range(m):
            if C[i, j] > cmax:
                cmax = C[i, j]
    tol = 1e-12 * (1.0 + cmax)

    pot = np.zeros(N)
    parent = np.empty(N, np.int64)
    depth = np.empty(N, np.int64)
    queue = np.empty(N, np.int64)
    seen = np.empty(N, np.bool_)
    left = np.empty(N, np.int64)
    right = np.empty(N, np.int64)
    path = np.empty(N + 1, np.int64)

    pivots = 0
    while True:
        seen[:] = False
        seen[0] = True
        parent[0] = -1
        depth[0] = 0
        pot[0] = 0.0
        head = 0
        tail = 1
        queue[0] = 0
        while head < tail:
            x = queue[head]
            head += 1
            for s in range(deg[x]):
                y = adj[x, s]
                if not seen[y]:
                    seen[y] = True
                    parent[y] = x
                    depth[y] = depth[x] + 1
                    if x < n:
                        pot[y] = C[x, y - n] - pot[x]
                    else:
                        pot[y] = C[y, x - n] - pot[x]
                    queue[tail] = y
                    tail += 1

        best = -tol
        ie = -1
        je = -1
        for i in range(n):
            ui = pot[i]
            for j in range(m):
                r = C[i, j] - ui - pot[n + j]
                if r < best:
                    best = r
                    ie = i
                    je = j
        if ie < 0:
            return flow, pivots, True
        if pivots >= max_pivots:
            return flow, pivots, False

        # tree path from column node n+je to row ie through their common ancestor
        x = ie
        y = n + je
        nl = 1
        nr = 1
        left[0] = x
        right[0] = y
        while depth[x] > depth[y]:
            x = parent[x]
            left[nl] = x
            nl += 1
        while depth[y] > depth[x]:
            y = parent[y]
            right[nr] = y
            nr += 1
        while x != y:
            x = parent[x]
            left[nl] = x
            nl += 1
            y = parent[y]
            right[nr] = y
            nr += 1
        plen = 0
        for s in range(nr):
            path[plen] = right[s]
            plen += 1
        for s in range(nl - 2, -1, -1):
            path[plen] = left[s]
            plen += 1

        # arcs alternate -, +, -, ... walking from the column end
        theta = np.inf
        li = -1
        lj = -1
        for s in range(0, plen - 1, 2):
            p = path[s]
            q = path[s + 1]
            if p < n:
                ci, cj = p, q - n
            else:
                ci, cj = q, p - n
            if flow[ci, cj] < theta:
                theta = flow[ci, cj]
                li = ci
                lj = cj
        for s in range(plen - 1):
            p = path[s]
            q = path[s + 1]
            if p < n:
                ci, cj = p, q - n
            else:
                ci, cj = q, p - n
            if s % 2 == 0:
                flow[ci, cj] -= theta
            else:
                flow[ci, cj] += theta
        flow[ie, je] += theta
        flow[li, lj] = 0.0

        _drop_arc(adj, deg, li, n + lj)
        _drop_arc(adj, deg, n + lj, li)
        adj[ie, deg[ie]] = n + je
        deg[ie] += 1
        adj[n + je, deg[n + je]] = ie
        deg[n + je] += 1
        pivots += 1


@njit(cache=True)
def _drop_arc(adj, deg, x, y):  # pragma: no cover - jitted
    for s in range(deg[x]):
        if adj[x, s] == y:
            adj[x, s] = adj[x, deg[x] - 1]
            deg[x] -= 1
            return


def emd_exact(
    a: DiscreteDistribution,
    b: DiscreteDistribution,
    C: np.ndarray | None = None,
    *,
    method: str = "auto",
    max_pivots: int = 1_000_000,
) -> TransportPlan:
    """Exact 1-Wasserstein transport plan between ``a`` and ``b``.

    ``method`` is ``"simplex"`` (network simplex, any weights), ``"assignment"``
    (uniform equal-size supports only, solved as a min-cost perfect matching),
    or ``"auto"`` which picks the assignment route whenever it applies.
    """
    if C is None:
        C = cost_matrix(a, b)
    C = _check_problem(a, b, C)
    n, m = C.shape

    use_assignment = n == m and a.is_uniform and b.is_uniform
    if method == "assignment" and not use_assignment:
        raise ValidationError("assignment route needs uniform weights of equal size")
    if method not in ("auto", "simplex", "assignment"):
        raise ValidationError(f"unknown method {method!r}")

    if method != "simplex" and use_assignment:
        rows, cols = linear_sum_assignment(C)
        coupling = np.zeros((n, m))
        coupling[rows, cols] = 1.0 / n
        value = float(C[rows, cols].sum() / n)
        return TransportPlan(coupling, value)

    ra, rb = _principal_order(a, b)
    supply = a.weights[ra]
    demand = b.weights[rb] * (supply.sum() / b.weights.sum())
    flow, pivots, ok = _simplex_kernel(
        supply, demand, np.ascontiguousarray(C[np.ix_(ra, rb)]), max_pivots
    )
    if not ok:
        logger.warning("network simplex hit max_pivots=%d before optimality", max_pivots)
    flow = np.maximum(flow, 0.0)
    coupling = np.empty_like(flow)
    coupling[np.ix_(ra, rb)] = flow
    return TransportPlan(coupling, float(np.sum(coupling * C)), ok, pivots)


def _sinkhorn_log(log_a, log_b, C, reg, max_iter, tol, weights_a):
    f = np.zeros(C.shape[0])
    g = np.zeros(C.shape[1])
    best = (math.inf, f, g)
    it = 0
    for it in range(1, max_iter + 1):
        f = reg * (log_a - logsumexp((g[None, :] - C) / reg, axis=1))
        g = reg * (log_b - logsumexp((f[:, None] - C) / reg, axis=0))
        log_rows = logsumexp((f[:, None] + g[None, :] - C) / reg, axis=1)
        err = float(np.abs(np.exp(log_rows) - weights_a).sum())
        if err < best[0]:
            best = (err, f, g)
        if err < tol:
            break
    err, f, g = best
    return np.exp((f[:, None] + g[None, :] - C) / reg), err, it


def _sinkhorn_kernel(a, b, C, reg, max_iter, tol, check_every=10):
    """Plain scaling iterations; returns None when the scalings under/overflow."""
    K = np.exp(-C / reg)
    u = np.ones(C.shape[0])
    v = np.ones(C.shape[1])
    best = (math.inf, u, v)
    it = 0
    with np.errstate(all="ignore"):
        for it in range(1, max_iter + 1):
            Kv = K @ v
            u = a / Kv
            KTu = K.T @ u
            v = b / KTu
            if it % check_every and it != max_iter:
                continue
            if not (np.all(np.isfinite(u)) and np.all(np.isfinite(v))):
                return None
            if np.any((Kv == 0) & (a > 0)) or np.any((KTu == 0) & (b > 0)):
                return None
            err = float(np.abs(u * (K @ v) - a).sum())
            if err < best[0]:
                best = (err, u, v)
            if err < tol:
                break
    err, u, v = best
    return u[:, None] * K * v[None, :], err, it


def sinkhorn(
    a: DiscreteDistribution,
    b: DiscreteDistribution,
    C: np.ndarray | None = None,
    reg: float = 0.1,
    max_iter: int = 10_000,
    tol: float = 1e-9,
    *,
    log_domain: bool = False,
) -> TransportPlan:
    """Entropic OT coupling via Sinkhorn scaling iterations.

    ``value`` is the plain transport cost of the entropic coupling (no entropy
    term), which tends to the exact EMD as ``reg`` shrinks. Convergence is
    the L1 violation of the row marginals, checked every 10 column updates
    in the kernel domain and after every update in the log domain. The
    iterations run on the Gibbs kernel and restart in the log domain if a
    scaling vector underflows; ``log_domain=True`` skips straight there. If
    ``tol`` is not reached the best iterate comes back with ``converged=False``.
    """
    if reg <= 0:
        raise ValidationError("reg must be positive")
    if C is None:
        C = cost_matrix(a, b)
    C = _check_problem(a, b, C)

    result = None
    if not log_domain:
        result = _sinkhorn_kernel(a.weights, b.weights, C, reg, max_iter, tol)
        if result is None:
            logger.debug("sinkhorn scaling underflow at reg=%g, switching to log domain", reg)
    if result is None:
        with np.errstate(divide="ignore"):
            log_a = np.log(a.weights)
            log_b = np.log(b.weights)
        result = _sinkhorn_log(log_a, log_b, C, reg, max_iter, tol, a.weights)
    coupling, err, it = result
    converged = err < tol
    if not converged:
        logger.info("sinkhorn did not reach tol=%g in %d iterations (err=%g)", tol, max_iter, err)
    return TransportPlan(coupling, float(np.sum(coupling * C)), converged, it)


def wasserstein(
    a: DiscreteDistribution,
    b: DiscreteDistribution,
    backend: str = "exact",
    reg: float = 0.1,
) -> float:
    """W_1 value between ``a`` and ``b`` using the named backend."""
    C = cost_matrix(a, b)
    if backend == "exact":
        return emd_exact(a, b, C).value
    if backend == "sinkhorn":
        return sinkhorn(a, b, C, reg=reg).value
    raise ValidationError(f"unknown transport backend {backend!r}")


def subsample(
    dist: DiscreteDistribution,
    fraction: float = 0.1,
    cap: int = 512,
    floor: int | None = None,
    seed: int | np.random.SeedSequence = 0,
) -> DiscreteDistribution:
    """Uniform subsample without replacement of ``max(floor, min(ceil(fraction*n), cap))`` points.

    ``floor`` defaults to ``min(n, 64)``; the result is clamped to ``n`` points
    and carries uniform weights.
    """
    if not 0 < fraction <= 1:
        raise ValidationError("fraction must lie in (0, 1]")
    if cap < 1:
        raise ValidationError("cap must be >= 1")
    n = dist.n
    if floor is None:
        floor = min(n, 64)
    k = min(n, max(floor, min(math.ceil(fraction * n), cap)))
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(n, size=k, replace=False))
    return DiscreteDistribution.uniform(dist.points[idx])
