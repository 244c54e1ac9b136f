"""Reference solvers for small instances, used to validate the Sinkhorn solver.

:func:`exact_balanced_ot` solves the unregularised, hard-constrained transport
linear program with the transportation simplex. :func:`primal_uot_oracle`
minimises the entropic unbalanced objective directly over the plan. Neither
touches dual potentials; they share only :func:`~otkd.sinkhorn.cost_matrix`
with the production solver.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .errors import InvalidInputError, UnsupportedSizeError
from .predictions import WeightedPointSet
from .sinkhorn import SinkhornConfig, cost_matrix

__all__ = ["ExactPlanResult", "exact_balanced_ot", "primal_uot_oracle", "EXACT_SIZE_LIMIT", "PRIMAL_SIZE_LIMIT"]

EXACT_SIZE_LIMIT = 32
PRIMAL_SIZE_LIMIT = 6
LOG_STEP_CAP = 10.0


@dataclass(frozen=True, eq=False)
class ExactPlanResult:
    value: float
    plan: np.ndarray
    iterations: int
    history: tuple = field(default=(), repr=False)


# -- transportation simplex ------------------------------------------------


def _northwest_corner(supply, demand):
    """Initial basic feasible solution: a staircase of exactly n + m - 1 cells."""
    n, m = len(supply), len(demand)
    s, d = supply.copy(), demand.copy()
    basis = {}
    i = j = 0
    while True:
        x = min(s[i], d[j])
        basis[(i, j)] = x
        s[i] -= x
        d[j] -= x
        if i == n - 1 and j == m - 1:
            break
        if i == n - 1:
            j += 1
        elif j == m - 1:
            i += 1
        elif s[i] <= d[j]:
            i += 1
        else:
            j += 1
    return basis


def _tree_adjacency(basis, n):
    # rows are nodes 0..n-1, columns n..n+m-1
    adj = {}
    for i, j in basis:
        adj.setdefault(i, []).append(n + j)
        adj.setdefault(n + j, []).append(i)
    return adj


def _duals(basis, C):
    n, m = C.shape
    adj = _tree_adjacency(basis, n)
    pot = {0: 0.0}
    queue = deque([0])
    while queue:
        node = queue.popleft()
        for nb in adj.get(node, ()):
            if nb in pot:
                continue
            i, j = (node, nb - n) if node < n else (nb, node - n)
            pot[nb] = C[i, j] - pot[node]
            queue.append(nb)
    if len(pot) != n + m:
        raise RuntimeError("basis is not a spanning tree")
    u = np.array([pot[i] for i in range(n)])
    v = np.array([pot[n + j] for j in range(m)])
    return u, v


def _tree_path(basis, n, start, goal):
    """Nodes on the unique tree path from ``start`` to ``goal``."""
    adj = _tree_adjacency(basis, n)
    parent = {start: None}
    queue = deque([start])
    while queue:
        node = queue.popleft()
        if node == goal:
            break
        for nb in adj.get(node, ()):
            if nb not in parent:
                parent[nb] = node
                queue.append(nb)
    path = [goal]
    while parent[path[-1]] is not None:
        path.append(parent[path[-1]])
    return path[::-1]


def exact_balanced_ot(a: WeightedPointSet, b: WeightedPointSet, p: int = 2, max_pivots: int = 100_000) -> ExactPlanResult:
    """Exact optimal transport with hard marginal constraints.

    North-west-corner start, MODI duals on the basis tree, Bland's rule for
    entering and leaving cells (so degenerate pivots cannot cycle). Terminates
    when every reduced cost is nonnegative, which certifies optimality.
    """
    n, m = len(a), len(b)
    if n > EXACT_SIZE_LIMIT or m > EXACT_SIZE_LIMIT:
        raise UnsupportedSizeError(f"exact oracle handles at most {EXACT_SIZE_LIMIT} points per side, got {n} x {m}")
    if not math.isclose(a.mass, b.mass, rel_tol=1e-9):
        raise InvalidInputError(f"balanced transport needs equal masses, got {a.mass} and {b.mass}")
    C = cost_matrix(a, b, p)
    supply = a.weights.astype(float)
    demand = b.weights * (supply.sum() / b.weights.sum())
    basis = _northwest_corner(supply, demand)
    tol = 1e-12 * (1.0 + float(C.max()))
    pivots = 0
    while True:
        u, v = _duals(basis, C)
        reduced = C - u[:, None] - v[None, :]
        negative = np.argwhere(reduced < -tol)
        if len(negative) == 0:
            break
        if pivots >= max_pivots:
            raise RuntimeError("transportation simplex did not terminate")
        pivots += 1
        ei, ej = (int(k) for k in negative[0])  # Bland: lowest row-major index
        nodes = _tree_path(basis, n, n + ej, ei)
        cells = []
        for s, t in zip(nodes[:-1], nodes[1:]):
            cells.append((t, s - n) if s >= n else (s, t - n))
        # cells alternate -, +, -, ... starting next to the entering cell
        minus = cells[0::2]
        plus = cells[1::2]
        theta = min(basis[c] for c in minus)
        leaving = min((c for c in minus if basis[c] == theta), key=lambda c: c[0] * m + c[1])
        for c in minus:
            basis[c] -= theta
        for c in plus:
            basis[c] += theta
        del basis[leaving]
        basis[(ei, ej)] = theta
    plan = np.zeros((n, m))
    for (i, j), x in basis.items():
        plan[i, j] = max(x, 0.0)
    return ExactPlanResult(float(np.sum(plan * C)), plan, pivots)


# -- primal entropic unbalanced minimiser ----------------------------------


def _objective(L, C, lab, la, lb, eps2, rho2):
    P = np.exp(L)
    lr = logsumexp(L, axis=1)
    lc = logsumexp(L, axis=0)
    r, c = np.exp(lr), np.exp(lc)
    value = np.sum(P * C) + eps2 * np.sum(P * (L - lab) - P + np.exp(lab))
    value += rho2 * np.sum(r * (lr - la) - r + np.exp(la))
    value += rho2 * np.sum(c * (lc - lb) - c + np.exp(lb))
    grad = C + eps2 * (L - lab) + rho2 * (lr - la)[:, None] + rho2 * (lc - lb)[None, :]
    return float(value), grad, P, r, c


def primal_uot_oracle(
    a: WeightedPointSet,
    b: WeightedPointSet,
    cfg: SinkhornConfig,
    precision: float = 1e-12,
    mirror_steps: int = 200,
    max_iter: int = 2000,
) -> ExactPlanResult:
    """Minimise the entropic unbalanced objective over nonnegative plans.

    The plan is kept in log form, so every update is multiplicative and the
    plan stays positive. A first phase runs mirror descent with the step
    ``1 / (eps**2 + 2 rho**2)``, for which the objective is relatively smooth
    with respect to the entropy and so decreases monotonically. Plain mirror
    descent is far too slow to reach high precision once ``eps**2`` is small
    against ``rho**2``, so a second phase takes damped Newton steps on the
    log-plan (still multiplicative updates of the plan) with an Armijo line
    search that keeps the decrease monotone. Iteration stops once the
    predicted relative decrease falls below ``precision``.

    ``history`` on the result holds the objective after every iteration.
    """
    n, m = len(a), len(b)
    if n > PRIMAL_SIZE_LIMIT or m > PRIMAL_SIZE_LIMIT:
        raise UnsupportedSizeError(f"primal oracle handles at most {PRIMAL_SIZE_LIMIT} points per side, got {n} x {m}")
    if cfg.balanced:
        raise InvalidInputError("primal oracle needs a finite rho; use exact_balanced_ot for hard marginals")
    eps2, rho2 = cfg.entropic_strength, cfg.marginal_strength
    C = cost_matrix(a, b, cfg.p_exponent)
    la, lb = np.log(a.weights), np.log(b.weights)
    lab = la[:, None] + lb[None, :]
    L = lab.copy()
    value, grad, P, r, c = _objective(L, C, lab, la, lb, eps2, rho2)
    history = [value]
    step = 1.0 / (eps2 + 2.0 * rho2)
    it = 0
    with np.errstate(under="ignore", over="ignore", invalid="ignore"):
        for it in range(1, mirror_steps + 1):
            L_new = L - step * grad
            v_new, g_new, P_new, r_new, c_new = _objective(L_new, C, lab, la, lb, eps2, rho2)
            decrease = value - v_new
            if v_new > value:
                # relative smoothness guarantees descent; a rise is round-off
                break
            L, value, grad, P, r, c = L_new, v_new, g_new, P_new, r_new, c_new
            history.append(value)
            if decrease <= precision * abs(value):
                break

        rows = np.repeat(np.arange(n), m)
        cols = np.tile(np.arange(m), n)
        same_row = rows[:, None] == rows[None, :]
        same_col = cols[:, None] == cols[None, :]
        while it < max_iter:
            it += 1
            p = P.reshape(-1)
            pg = p * grad.reshape(-1)
            # Hessian in log coordinates is D H D + diag(P * grad) with H the
            # plan-space Hessian; |P * grad| keeps it positive definite and
            # vanishes at the optimum, so the final steps are pure Newton
            H = eps2 * np.diag(p)
            H += rho2 * same_row * np.outer(p, p) / r[rows][:, None]
            H += rho2 * same_col * np.outer(p, p) / c[cols][:, None]
            H[np.diag_indices_from(H)] += np.abs(pg)
            diag = np.diag(H).copy()
            dead = ~(diag > 0)  # entries that underflowed to zero mass
            diag[dead] = 1.0
            scale = 1.0 / np.sqrt(diag)
            Hs = H * scale[:, None] * scale[None, :]
            Hs[dead, dead] = 1.0
            try:
                z = np.linalg.solve(Hs, -pg * scale) * scale
            except np.linalg.LinAlgError:
                z = np.linalg.lstsq(Hs, -pg * scale, rcond=None)[0] * scale
            slope = float(pg @ z)
            if not slope < 0 or -0.5 * slope <= precision * abs(value):
                break
            # trust region: no log-entry moves by more than LOG_STEP_CAP
            t = min(1.0, LOG_STEP_CAP / float(np.abs(z).max()))
            z = z.reshape(n, m)
            while True:
                L_new = L + t * z
                v_new, g_new, P_new, r_new, c_new = _objective(L_new, C, lab, la, lb, eps2, rho2)
                if np.isfinite(v_new) and v_new <= value + 1e-4 * t * slope:
                    break
                t *= 0.5
                if t < 1e-14:
                    v_new = None
                    break
            if v_new is None:
                break
            L, value, grad, P, r, c = L_new, v_new, g_new, P_new, r_new, c_new
            history.append(value)
    return ExactPlanResult(value, P, it, tuple(history))
