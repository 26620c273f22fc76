"""Set distances between uniform empirical measures and between Gaussians.

All costs are squared Euclidean.  ``exact_w2`` solves the transportation LP
with the transportation simplex, ``sinkhorn_w2`` runs entropic scaling, and
``gaussian_w2`` evaluates the Bures closed form.  ``mean_euclid`` is the
mean-pooling baseline.
"""

from __future__ import annotations

import itertools
import logging
import math
from collections import deque
from dataclasses import dataclass
from typing import Protocol

import numpy as np

from setdist.linalg import as_symmetric, psd_sqrt
from setdist.measures import (
    DEFAULT_EPS,
    EmpiricalMeasure,
    GaussianMeasure,
    Tracklet,
    estimate_empirical,
    estimate_gaussian,
    moving_average,
)

log = logging.getLogger(__name__)

METHODS = ("exact", "sinkhorn", "gaussian", "mean_euclid")
ORACLE_MAX_SUPPORT = 8
SIMPLEX_MAX_PIVOTS = 200_000
GAUSSIAN_NEG_TOL = 1e-8


class ConvergenceError(RuntimeError):
    """An iterative solver hit its iteration cap."""

    def __init__(self, message: str, iterations: int, violation: float | None = None):
        super().__init__(message)
        self.iterations = iterations
        self.violation = violation


@dataclass(frozen=True)
class DistanceResult:
    """Outcome of one set-distance evaluation.

    ``value`` is the reported distance.  For Sinkhorn it is the transport
    cost <P, M>; ``objective`` then additionally carries the entropic
    objective <P, M> + (scale/lambda) * sum(P log P) that the plan minimises.
    """

    value: float
    method: str
    plan: np.ndarray | None = None
    objective: float | None = None


@dataclass(frozen=True)
class DistanceParams:
    lam: float = 20.0
    eps: float = DEFAULT_EPS
    window: int = 1
    max_iter: int = 10_000
    tol: float = 1e-9


def normalize_method(method: str) -> str:
    m = method.replace("-", "_").lower()
    if m not in METHODS:
        raise ValueError(f"unknown method {method!r}; expected one of {', '.join(METHODS)}")
    return m


def _points(x) -> np.ndarray:
    if isinstance(x, EmpiricalMeasure):
        return x.points
    return estimate_empirical(x).points


def _check_dims(x: np.ndarray, y: np.ndarray) -> None:
    if x.shape[1] != y.shape[1]:
        raise ValueError(f"dimension mismatch: {x.shape[1]} vs {y.shape[1]}")


def cost_matrix(x, y) -> np.ndarray:
    """Pairwise squared Euclidean distances, shape (n_x, n_y)."""
    x, y = _points(x), _points(y)
    _check_dims(x, y)
    m = np.zeros((x.shape[0], y.shape[0]))
    # one coordinate at a time: exact differences, O(n_x * n_y) memory
    for d in range(x.shape[1]):
        diff = x[:, d, None] - y[None, :, d]
        m += diff * diff
    return m


# ---------------------------------------------------------------------------
# exact solver


def _tree_path(basis: list[tuple[int, int]], m: int, n: int, start_row: int, end_col: int):
    """Edges (cells) on the unique basis-tree path from a row node to a column node."""
    adj: list[list[tuple[int, tuple[int, int]]]] = [[] for _ in range(m + n)]
    # node ids: rows 0..m-1, columns m..
    for cell in basis:
        i, j = cell
        adj[i].append((m + j, cell))
        adj[m + j].append((i, cell))
    target = m + end_col
    parent: dict[int, tuple[int, tuple[int, int]]] = {start_row: (-1, (-1, -1))}
    queue = deque([start_row])
    while queue:
        node = queue.popleft()
        if node == target:
            break
        for nxt, cell in adj[node]:
            if nxt not in parent:
                parent[nxt] = (node, cell)
                queue.append(nxt)
    path = []
    node = target
    while node != start_row:
        prev, cell = parent[node]
        path.append(cell)
        node = prev
    path.reverse()
    return path


def _potentials(basis, cost, m, n):
    u = np.full(m, np.nan)
    v = np.full(n, np.nan)
    rows: list[list[int]] = [[] for _ in range(m)]
    cols: list[list[int]] = [[] for _ in range(n)]
    for i, j in basis:
        rows[i].append(j)
        cols[j].append(i)
    u[0] = 0.0
    queue = deque([(0, True)])
    while queue:
        idx, is_row = queue.popleft()
        if is_row:
            for j in rows[idx]:
                if np.isnan(v[j]):
                    v[j] = cost[idx, j] - u[idx]
                    queue.append((j, False))
        else:
            for i in cols[idx]:
                if np.isnan(u[i]):
                    u[i] = cost[i, idx] - v[idx]
                    queue.append((i, True))
    return u, v


def transport_simplex(cost: np.ndarray, max_pivots: int = SIMPLEX_MAX_PIVOTS) -> np.ndarray:
    """Optimal plan of the uniform-marginal transportation problem.

    Works on integer flows: every row ships ``n`` units and every column
    receives ``m`` units, so the plan is ``flow / (m * n)``.  Initial basis
    from the north-west corner rule; Bland's rule (lowest flat index) picks
    both the entering and the leaving cell, which rules out cycling.
    """
    cost = np.asarray(cost, dtype=np.float64)
    m, n = cost.shape
    flow = np.zeros((m, n), dtype=np.int64)
    supply = [n] * m
    demand = [m] * n
    basis: list[tuple[int, int]] = []
    i = j = 0
    while True:
        x = min(supply[i], demand[j])
        flow[i, j] = x
        supply[i] -= x
        demand[j] -= x
        basis.append((i, j))
        if i == m - 1 and j == n - 1:
            break
        if supply[i] == 0 and i < m - 1:
            i += 1
        else:
            j += 1

    tol = 1e-11 * max(1.0, float(np.max(np.abs(cost)))) * (m + n)
    in_basis = np.zeros((m, n), dtype=bool)
    for cell in basis:
        in_basis[cell] = True

    for pivot in range(max_pivots + 1):
        u, v = _potentials(basis, cost, m, n)
        reduced = cost - u[:, None] - v[None, :]
        candidates = np.flatnonzero((reduced < -tol) & ~in_basis)
        if candidates.size == 0:
            return flow
        if pivot == max_pivots:
            break
        ei, ej = divmod(int(candidates[0]), n)
        path = _tree_path(basis, m, n, ei, ej)
        minus = path[0::2]
        theta = min(flow[c] for c in minus)
        leaving = min((c for c in minus if flow[c] == theta), key=lambda c: c[0] * n + c[1])
        for c in minus:
            flow[c] -= theta
        for c in path[1::2]:
            flow[c] += theta
        flow[ei, ej] += theta
        basis.remove(leaving)
        in_basis[leaving] = False
        basis.append((ei, ej))
        in_basis[ei, ej] = True
    raise ConvergenceError(
        f"transportation simplex did not converge after {max_pivots} pivots", max_pivots
    )


def exact_w2(x, y) -> DistanceResult:
    """Squared 2-Wasserstein distance between two uniform empirical measures."""
    x, y = _points(x), _points(y)
    c = cost_matrix(x, y)
    flow = transport_simplex(c)
    plan = flow / float(c.shape[0] * c.shape[1])
    value = float(np.sum(plan * c))
    return DistanceResult(value=max(value, 0.0), method="exact", plan=plan)


def brute_force_w2_oracle(x, y) -> float:
    """Exact W2^2 by enumerating permutations of an expanded assignment problem.

    Each point is replicated so both sides carry N = lcm(n_x, n_y) atoms of
    mass 1/N; an optimal coupling then sits at a permutation (Birkhoff).
    Only for N <= 8.
    """
    x, y = _points(x), _points(y)
    _check_dims(x, y)
    nx, ny = x.shape[0], y.shape[0]
    big = nx * ny // math.gcd(nx, ny)
    if big > ORACLE_MAX_SUPPORT:
        raise ValueError(f"oracle scale exceeded (lcm = {big} > {ORACLE_MAX_SUPPORT})")
    xt = np.repeat(x, big // nx, axis=0)
    yt = np.repeat(y, big // ny, axis=0)
    c = ((xt[:, None, :] - yt[None, :, :]) ** 2).sum(axis=-1)
    perms = np.array(list(itertools.permutations(range(big))), dtype=np.intp)
    totals = c[np.arange(big), perms].sum(axis=1)
    return float(totals.min() / big)


# ---------------------------------------------------------------------------
# Sinkhorn


def _dual_value(alpha, beta, kernel, a, b):
    p = np.exp(alpha)[..., :, None] * kernel * np.exp(beta)[..., None, :]
    return a * alpha.sum(axis=-1) + b * beta.sum(axis=-1) - p.sum(axis=(-2, -1)), p


def _newton_polish(kernel, u, v, a, b, tol, max_steps):
    """Newton ascent on the concave dual in (log u, log v), last log v pinned.

    Used once plain scaling stalls: near a well-separated optimum the
    marginal map is almost flat and Sinkhorn's contraction factor tends to 1,
    while Newton converges quadratically to the same fixed point.
    """
    n, m = kernel.shape[-2:]
    alpha, beta = np.log(u), np.log(v)
    value, plan = _dual_value(alpha, beta, kernel, a, b)
    violation = np.inf
    for step in range(max_steps + 1):
        rows, cols = plan.sum(axis=-1), plan.sum(axis=-2)
        grad = np.concatenate([a - rows, (b - cols)[..., : m - 1]], axis=-1)
        violation = float(max(np.max(np.abs(a - rows)), np.max(np.abs(b - cols))))
        if violation < tol or step == max_steps:
            break
        size = n + m - 1
        hess = np.zeros(plan.shape[:-2] + (size, size))
        idx = np.arange(n)
        hess[..., idx, idx] = rows
        jdx = np.arange(m - 1)
        hess[..., n + jdx, n + jdx] = cols[..., : m - 1]
        hess[..., :n, n:] = plan[..., :, : m - 1]
        hess[..., n:, :n] = np.swapaxes(plan[..., :, : m - 1], -1, -2)
        try:
            delta = np.linalg.solve(hess, grad[..., None])[..., 0]
        except np.linalg.LinAlgError:
            delta = grad / np.maximum(np.abs(np.diagonal(hess, axis1=-2, axis2=-1)), 1e-300)
        d_alpha = delta[..., :n]
        d_beta = np.concatenate([delta[..., n:], np.zeros(delta.shape[:-1] + (1,))], axis=-1)
        slope = np.sum(grad * delta, axis=-1)
        t = np.ones(value.shape)
        accepted = np.zeros(value.shape, dtype=bool)
        new_alpha, new_beta, new_value, new_plan = alpha, beta, value, plan
        for _ in range(60):
            ta = t[..., None]
            cand_alpha = alpha + ta * d_alpha
            cand_beta = beta + ta * d_beta
            with np.errstate(over="ignore", invalid="ignore"):
                cand_value, cand_plan = _dual_value(cand_alpha, cand_beta, kernel, a, b)
            # slack: near the optimum the ascent is below the rounding of the dual value
            slack = 8 * np.finfo(float).eps * (np.abs(value) + 1.0)
            ok = np.isfinite(cand_value) & (cand_value >= value + 1e-4 * t * slope - slack) & ~accepted
            sel = ok[..., None]
            new_alpha = np.where(sel, cand_alpha, new_alpha)
            new_beta = np.where(sel, cand_beta, new_beta)
            new_value = np.where(ok, cand_value, new_value)
            new_plan = np.where(sel[..., None], cand_plan, new_plan)
            accepted |= ok
            if np.all(accepted):
                break
            t = np.where(accepted, t, 0.5 * t)
        if not np.any(accepted):
            break
        alpha, beta, value, plan = new_alpha, new_beta, new_value, new_plan
    return plan, violation


def sinkhorn_plans(
    costs: np.ndarray,
    lam: float,
    max_iter: int = 10_000,
    tol: float = 1e-9,
    polish_after: int = 1_000,
) -> tuple[np.ndarray, np.ndarray]:
    """Entropic plans for a stack of cost matrices of equal shape.

    ``costs`` has shape (..., n, m).  Each matrix is divided by its own
    maximum before forming the kernel exp(-lam * M / max M).  Returns the
    plans and the per-matrix scales.  Convergence means every marginal
    violation is below ``tol``.  If plain scaling has not converged after
    ``polish_after`` iterations, Newton steps on the log-scalings finish the
    job; ``max_iter`` caps the total number of iterations of both kinds.
    """
    costs = np.asarray(costs, dtype=np.float64)
    n, m = costs.shape[-2:]
    scale = costs.max(axis=(-2, -1))
    safe = np.where(scale > 0, scale, 1.0)
    kernel = np.exp(-lam * costs / safe[..., None, None])
    if np.any(kernel.max(axis=-1) == 0.0) or np.any(kernel.max(axis=-2) == 0.0):
        raise ValueError("lambda too large for cost scale; use exact solver")
    a, b = 1.0 / n, 1.0 / m
    kernel_t = np.swapaxes(kernel, -1, -2)
    u = np.ones(costs.shape[:-1])
    v = np.ones(costs.shape[:-2] + (m,))
    violation = np.inf
    sweeps = min(max_iter, polish_after)
    converged = False
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        for it in range(sweeps + 1):
            kv = np.matmul(kernel, v[..., None])[..., 0]
            if it > 0:
                violation = float(np.max(np.abs(u * kv - a)))
                if violation < tol:
                    converged = True
                    break
                if it == sweeps:
                    break
            u = a / kv
            ktu = np.matmul(kernel_t, u[..., None])[..., 0]
            v = b / ktu
            if not (np.all(np.isfinite(u)) and np.all(np.isfinite(v))):
                raise ValueError("lambda too large for cost scale; use exact solver")
            if np.any(u == 0) or np.any(v == 0):
                raise ValueError("lambda too large for cost scale; use exact solver")
    if converged:
        return u[..., :, None] * kernel * v[..., None, :], scale
    remaining = max_iter - sweeps
    if remaining > 0:
        plans, violation = _newton_polish(kernel, u, v, a, b, tol, min(remaining, 200))
        if violation < tol:
            return plans, scale
    raise ConvergenceError(
        f"Sinkhorn did not converge in {max_iter} iterations "
        f"(marginal violation {violation:.3e})",
        max_iter,
        violation,
    )


def neg_entropy(plan: np.ndarray) -> np.ndarray:
    """sum(P log P) over the last two axes, with 0 log 0 = 0."""
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(plan > 0, plan * np.log(plan), 0.0)
    return terms.sum(axis=(-2, -1))


def sinkhorn_w2(
    x, y, lam: float = 20.0, max_iter: int = 10_000, tol: float = 1e-9
) -> DistanceResult:
    """Entropy-regularised W2^2; the reported value is the transport cost <P, M>.

    ``lam`` is applied to the cost matrix divided by its maximum, so it is
    dimensionless.  ``lam == 0`` gives the independent coupling and hence the
    mean of M.
    """
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    c = cost_matrix(x, y)
    if lam == 0:
        plan = np.full(c.shape, 1.0 / c.size)
        return DistanceResult(
            value=float(np.mean(c)), method="sinkhorn", plan=plan, objective=float(np.mean(c))
        )
    plan, scale = sinkhorn_plans(c, lam, max_iter=max_iter, tol=tol)
    value = float(np.sum(plan * c))
    objective = value + float(scale) / lam * float(neg_entropy(plan))
    return DistanceResult(value=value, method="sinkhorn", plan=plan, objective=objective)


# ---------------------------------------------------------------------------
# Gaussian closed form and the pooling baseline


def _gaussian_w2(mean_a, cov_a, sqrt_a, mean_b, cov_b) -> float:
    cross = sqrt_a @ cov_b @ sqrt_a
    cross = 0.5 * (cross + cross.T)
    root = psd_sqrt(cross)
    diff = mean_a - mean_b
    tr_a, tr_b = float(np.trace(cov_a)), float(np.trace(cov_b))
    value = float(diff @ diff) + tr_a + tr_b - 2.0 * float(np.trace(root))
    if value < 0:
        if value < -GAUSSIAN_NEG_TOL * max(1.0, tr_a + tr_b):
            raise ArithmeticError(f"Gaussian W2 evaluated to {value:.3e}")
        value = 0.0
    return value


def gaussian_w2(a: GaussianMeasure, b: GaussianMeasure) -> DistanceResult:
    """Squared W2 between Gaussians: |m_a - m_b|^2 + Bures(cov_a, cov_b)."""
    if a.dim != b.dim:
        raise ValueError(f"dimension mismatch: {a.dim} vs {b.dim}")
    cov_a, cov_b = as_symmetric(a.covariance), as_symmetric(b.covariance)
    value = _gaussian_w2(a.mean, cov_a, psd_sqrt(cov_a), b.mean, cov_b)
    return DistanceResult(value=value, method="gaussian")


def mean_euclid(x, y) -> DistanceResult:
    """Euclidean (not squared) distance between the two point-cloud means."""
    x, y = _points(x), _points(y)
    _check_dims(x, y)
    value = float(np.linalg.norm(x.mean(axis=0) - y.mean(axis=0)))
    return DistanceResult(value=value, method="mean_euclid")


# ---------------------------------------------------------------------------
# tracklet-level dispatch


class Embedder(Protocol):
    def embed(self, frames: np.ndarray) -> np.ndarray: ...


def clamp_window(window: int, n: int) -> int:
    if window > n:
        log.debug("window %d clamped to tracklet length %d", window, n)
        return n
    return window


def prepare(frames: np.ndarray, model: Embedder | None, window: int) -> np.ndarray:
    """Embed frames and apply the moving average (window clamped to n)."""
    feats = model.embed(frames) if model is not None else np.asarray(frames, dtype=np.float64)
    return moving_average(feats, clamp_window(int(window), feats.shape[0]))


def distance_between(fx: np.ndarray, fy: np.ndarray, method: str, params: DistanceParams) -> DistanceResult:
    """Distance between two already-embedded, already-smoothed feature sets."""
    method = normalize_method(method)
    if method == "exact":
        return exact_w2(fx, fy)
    if method == "sinkhorn":
        return sinkhorn_w2(fx, fy, lam=params.lam, max_iter=params.max_iter, tol=params.tol)
    if method == "mean_euclid":
        return mean_euclid(fx, fy)
    return gaussian_w2(estimate_gaussian(fx, params.eps), estimate_gaussian(fy, params.eps))


def set_distance(
    x: Tracklet,
    y: Tracklet,
    model: Embedder | None = None,
    method: str = "sinkhorn",
    params: DistanceParams | None = None,
) -> DistanceResult:
    """Embed -> smooth -> estimate -> distance, for one pair of tracklets.

    ``model=None`` uses the raw features.  A window longer than a tracklet is
    clamped to that tracklet's length.
    """
    params = params or DistanceParams()
    fx = prepare(x.frames, model, params.window)
    fy = prepare(y.frames, model, params.window)
    return distance_between(fx, fy, method, params)


# ---------------------------------------------------------------------------
# gradients


def grad_ot_points(x, y, plan) -> tuple[np.ndarray, np.ndarray]:
    """Gradient of <P, M(x, y)> in the points with the plan held fixed.

    d/dx_k = sum_l P_kl * 2 (x_k - y_l); d/dy_l = sum_k P_kl * 2 (y_l - x_k).
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    plan = np.asarray(plan, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 2 or x.shape[1] != y.shape[1]:
        raise ValueError(f"shape mismatch: points {x.shape} vs {y.shape}")
    if plan.shape != (x.shape[0], y.shape[0]):
        raise ValueError(f"plan shape {plan.shape} does not match ({x.shape[0]}, {y.shape[0]})")
    gx = 2.0 * (plan.sum(axis=1)[:, None] * x - plan @ y)
    gy = 2.0 * (plan.sum(axis=0)[:, None] * y - plan.T @ x)
    return gx, gy


def grad_sinkhorn_objective(x, y, plan, lam: float) -> tuple[np.ndarray, np.ndarray]:
    """Gradient of the entropic objective <P, M> + (max M / lam) sum(P log P).

    The plan term is the envelope gradient; the second term accounts for the
    cost normalisation, whose scale is the largest entry of M.
    """
    gx, gy = grad_ot_points(x, y, plan)
    if lam == 0:
        return gx, gy
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    c = cost_matrix(x, y)
    k, l = np.unravel_index(int(np.argmax(c)), c.shape)
    coef = float(neg_entropy(np.asarray(plan))) / lam
    d = 2.0 * (x[k] - y[l])
    gx[k] += coef * d
    gy[l] -= coef * d
    return gx, gy
