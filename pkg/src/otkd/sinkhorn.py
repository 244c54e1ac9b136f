"""Entropic unbalanced optimal transport between weighted point clouds.

The objective minimised over nonnegative plans ``pi`` is::

    <pi, C> + eps**2 KL(pi | a x b) + rho**2 KL(pi 1 | a) + rho**2 KL(pi^T 1 | b)

with ``C_ij = ||x_i - y_j||_p`` and KL the generalised Kullback-Leibler
divergence ``sum p log(p / q) - p + q``. ``rho = inf`` turns the two marginal
penalties into hard constraints (balanced entropic OT).

Dual potentials ``(f, g)`` parameterise the plan as
``pi_ij = a_i b_j exp((f_i + g_j - C_ij) / eps**2)``. They are found by
log-domain Sinkhorn iterations on a decreasing ``eps`` schedule, each stage
finished by a damped Newton solve of the dual problem, which is what makes
the small ``eps`` values used for distillation converge in a few hundred
iterations rather than millions.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, replace

import numpy as np
from scipy.spatial.distance import cdist
from scipy.special import kl_div

from .errors import EmptyDistributionError, InvalidInputError
from .predictions import WeightedPointSet

__all__ = [
    "SinkhornConfig",
    "DualPotentials",
    "BatchSolution",
    "solve_batch",
    "TransportSummary",
    "cost_matrix",
    "sinkhorn_unbalanced",
    "debiased_divergence",
    "transport_plan",
    "plan_marginals",
    "uot_objective",
    "KEYPOINT_CONFIG",
    "DENSE_CONFIG",
]

ANNEAL_FACTOR = 0.25
SINKHORN_STEPS_PER_STAGE = 2
NEWTON_STEPS_PER_STAGE = 30


@dataclass(frozen=True)
class SinkhornConfig:
    """Solver parameters.

    ``epsilon`` and ``rho`` enter the objective squared. ``tol`` bounds the
    sup-norm change of the potentials, measured in units of ``epsilon``.
    """

    epsilon: float = 1e-3
    rho: float = 0.5
    p_exponent: int = 2
    max_iter: int = 500
    tol: float = 1e-6
    debiased: bool = True
    anneal: bool = True
    newton: bool = True

    def __post_init__(self):
        if not self.epsilon > 0 or not math.isfinite(self.epsilon):
            raise InvalidInputError(f"epsilon must be positive and finite, got {self.epsilon}")
        if not self.rho > 0:
            raise InvalidInputError(f"rho must be positive, got {self.rho}")
        if self.p_exponent not in (1, 2):
            raise InvalidInputError(f"p_exponent must be 1 or 2, got {self.p_exponent}")
        if self.max_iter < 1:
            raise InvalidInputError("max_iter must be >= 1")
        if not self.tol > 0:
            raise InvalidInputError("tol must be positive")

    @property
    def balanced(self) -> bool:
        return math.isinf(self.rho)

    @property
    def entropic_strength(self) -> float:
        return self.epsilon**2

    @property
    def marginal_strength(self) -> float:
        return self.rho**2

    def replace(self, **changes) -> "SinkhornConfig":
        return replace(self, **changes)


KEYPOINT_CONFIG = SinkhornConfig(epsilon=1e-3, rho=0.5)
DENSE_CONFIG = SinkhornConfig(epsilon=1e-4, rho=0.1)


@dataclass(frozen=True, eq=False)
class DualPotentials:
    f: np.ndarray
    g: np.ndarray


@dataclass(frozen=True)
class TransportSummary:
    transport_cost: float
    kl_joint: float
    kl_row: float
    kl_col: float
    total: float
    iterations: int
    converged: bool


def cost_matrix(x, y, p: int = 2) -> np.ndarray:
    """Pairwise ``l_p`` distances between the points of two clouds."""
    xp = x.points if isinstance(x, WeightedPointSet) else np.atleast_2d(np.asarray(x, dtype=float))
    yp = y.points if isinstance(y, WeightedPointSet) else np.atleast_2d(np.asarray(y, dtype=float))
    if xp.shape[1] != yp.shape[1]:
        raise InvalidInputError(f"dimension mismatch: {xp.shape[1]} vs {yp.shape[1]}")
    if p == 2:
        return cdist(xp, yp, metric="euclidean")
    if p == 1:
        return cdist(xp, yp, metric="cityblock")
    raise InvalidInputError(f"p must be 1 or 2, got {p}")


# Internals work on a leading batch axis: weights (B, n) / (B, m), costs
# (B, n, m), potentials (B, n) / (B, m). Each batch element follows its own
# schedule and stopping rule, so its result does not depend on its neighbours.


def _lse(a, axis):
    m = np.maximum.reduce(a, axis=axis, keepdims=True)
    m[np.isinf(m)] = 0.0
    s = np.add.reduce(np.exp(a - m), axis=axis, keepdims=True)
    return (m + np.log(s)).squeeze(axis)


def _damping(eps2, rho2):
    return np.ones_like(eps2) if math.isinf(rho2) else rho2 / (rho2 + eps2)


def _sinkhorn_step(la, lb, C, f, g, eps2, rho2):
    """One symmetric damped update followed by the optimal common translation.

    ``eps2`` has shape (B,).
    """
    e = eps2[:, None]
    damp = _damping(eps2, rho2)[:, None]
    ft = -damp * e * _lse(lb[:, None, :] + (g[:, None, :] - C) / e[:, :, None], axis=2)
    gt = -damp * e * _lse(la[:, :, None] + (f[:, :, None] - C) / e[:, :, None], axis=1)
    f = 0.5 * (f + ft)
    g = 0.5 * (g + gt)
    if not math.isinf(rho2):
        # (f + t, g - t) leaves the plan unchanged; pick t maximising the dual
        shift = 0.5 * rho2 * (_lse(la - f / rho2, 1) - _lse(lb - g / rho2, 1))
        f = f + shift[:, None]
        g = g - shift[:, None]
    return f, g


def _log_dual_terms(la, lb, C, f, g, eps2, rho2, value_only=False):
    """Log-plan, log row/col sums, log marginal targets and the negative dual value."""
    e = eps2[:, None, None]
    logP = la[:, :, None] + lb[:, None, :] + (f[:, :, None] + g[:, None, :] - C) / e
    log_r = _lse(logP, 2)
    val = eps2 * np.exp(_lse(log_r, 1))
    if value_only:
        if math.isinf(rho2):
            return val - (np.exp(la) * f).sum(axis=1) - (np.exp(lb) * g).sum(axis=1)
        return val + rho2 * ((np.exp(la) * np.expm1(-f / rho2)).sum(axis=1) + (np.exp(lb) * np.expm1(-g / rho2)).sum(axis=1))
    log_c = _lse(logP, 1)
    if math.isinf(rho2):
        log_u, log_v = la, lb
        val -= (np.exp(la) * f).sum(axis=1) + (np.exp(lb) * g).sum(axis=1)
    else:
        log_u, log_v = la - f / rho2, lb - g / rho2
        val += rho2 * ((np.exp(la) * np.expm1(-f / rho2)).sum(axis=1) + (np.exp(lb) * np.expm1(-g / rho2)).sum(axis=1))
    return logP, log_r, log_c, log_u, log_v, val


def _block_update(lw, C, h, eps2, rho2):
    """Exact maximisation of the dual in one potential with the other held fixed.

    ``C`` is oriented (B, rows, cols); ``lw`` and ``h`` live on the columns.
    """
    e = eps2[:, None]
    return -_damping(eps2, rho2)[:, None] * e * _lse(lw[:, None, :] + (h[:, None, :] - C) / e[:, :, None], axis=2)


def _scaled_residual(log_r, log_c, log_u, log_v, sc):
    lr = np.concatenate([log_r, log_c], axis=1)
    lu = np.concatenate([log_u, log_v], axis=1)
    return np.exp(lr + sc) - np.exp(lu + sc)


def _linear_solve(H, rhs):
    try:
        return np.linalg.solve(H, rhs[..., None])[..., 0]
    except np.linalg.LinAlgError:
        out = np.empty_like(rhs)
        for k in range(len(H)):
            try:
                out[k] = np.linalg.solve(H[k], rhs[k])
            except np.linalg.LinAlgError:
                out[k] = np.linalg.lstsq(H[k], rhs[k], rcond=None)[0]
        return out


def _newton(la, lb, C, f, g, eps2, rho2, stop, max_steps, active):
    """Damped Newton on the (convex) negative dual, for the ``active`` elements.

    Every step starts with an exact Sinkhorn sweep so that no single potential
    sits far from its own optimum (Newton alone would creep there by ``eps2``
    per step, as on an exponential). The Newton system is Jacobi-scaled in the
    log domain so that points carrying vanishing mass stay representable.

    ``stop`` and ``max_steps`` are per element. Returns
    ``(f, g, steps, converged, usable)``; ``usable`` is False where the line
    search stalled, in which case the caller falls back to plain Sinkhorn
    iterations.
    """
    B, n = la.shape
    m = lb.shape[1]
    balanced = math.isinf(rho2)
    log_e = np.log(eps2)[:, None]
    log_rho = 0.0 if balanced else math.log(rho2)
    f, g = f.copy(), g.copy()
    steps = np.zeros(B, dtype=int)
    converged = np.zeros(B, dtype=bool)
    usable = np.ones(B, dtype=bool)
    live = active & (max_steps > 0)
    eye = np.eye(n + m)
    while np.any(live):
        steps[live] += 1
        fn = _block_update(lb, C, g, eps2, rho2)
        gn = _block_update(la, np.swapaxes(C, 1, 2), fn, eps2, rho2)
        sweep = np.maximum(np.abs(fn - f).max(axis=1), np.abs(gn - g).max(axis=1))
        f = np.where(live[:, None], fn, f)
        g = np.where(live[:, None], gn, g)
        logP, log_r, log_c, log_u, log_v, val = _log_dual_terms(la, lb, C, f, g, eps2, rho2)
        bad = live & ~np.isfinite(val)
        usable[bad] = False
        live &= ~bad
        log_h = np.concatenate([log_r, log_c], axis=1) - log_e
        if not balanced:
            log_h = np.logaddexp(log_h, np.concatenate([log_u, log_v], axis=1) - log_rho)
        sc = -0.5 * log_h
        sgrad = _scaled_residual(log_r, log_c, log_u, log_v, sc)
        H = np.broadcast_to(eye, (B, n + m, n + m)).copy()
        off = np.exp(logP - log_e[:, :, None] + sc[:, :n, None] + sc[:, None, n:])
        H[:, :n, n:] = off
        H[:, n:, :n] = np.swapaxes(off, 1, 2)
        if balanced:
            v = np.concatenate([np.exp(-sc[:, :n]), -np.exp(-sc[:, n:])], axis=1)
            v /= np.linalg.norm(v, axis=1, keepdims=True)
            # the plan is invariant under (f + t, g - t); pin that direction
            H += v[:, :, None] * v[:, None, :]
        safe = live & np.all(np.isfinite(H), axis=(1, 2)) & np.all(np.isfinite(sgrad), axis=1)
        usable[live & ~safe] = False
        live &= safe
        H[~live] = eye
        sgrad[~live] = 0.0
        y = _linear_solve(H, -sgrad)
        d = np.sign(y) * np.exp(sc + np.log(np.abs(y)))
        d[~live] = 0.0
        bad = live & ~np.all(np.isfinite(d), axis=1)
        usable[bad] = False
        live &= ~bad
        d[~live] = 0.0
        size = np.maximum(np.abs(d).max(axis=1), sweep)
        slope = -(sgrad * y).sum(axis=1)
        res = np.abs(sgrad).max(axis=1)
        t = np.ones(B)
        pending = live.copy()
        ft, gt = f, g
        while np.any(pending):
            trial_f = f + t[:, None] * d[:, :n]
            trial_g = g + t[:, None] * d[:, n:]
            vt = _log_dual_terms(la, lb, C, trial_f, trial_g, eps2, rho2, value_only=True)
            ok = np.isfinite(vt) & (vt <= val + 1e-4 * t * slope)
            # near the optimum the dual value stalls at round-off level;
            # accept the step if it still shrinks the scaled gradient
            flat = np.isfinite(vt) & ~ok & (np.abs(vt - val) <= 1e-13 * (np.abs(val) + eps2))
            if np.any(flat & pending):
                terms = _log_dual_terms(la, lb, C, trial_f, trial_g, eps2, rho2)
                flat &= np.abs(_scaled_residual(*terms[1:5], sc)).max(axis=1) <= res
            accept = pending & (ok | flat)
            ft = np.where(accept[:, None], trial_f, ft)
            gt = np.where(accept[:, None], trial_g, gt)
            pending &= ~accept
            t[pending] *= 0.5
            stalled = pending & (t < 1e-12)
            usable[stalled] = False
            live &= ~stalled
            pending &= ~stalled
        f = np.where(live[:, None], ft, f)
        g = np.where(live[:, None], gt, g)
        done = live & (size <= stop)
        converged |= done
        live &= ~done
        live &= steps < max_steps
    return f, g, steps, converged, usable


def _stages(top, eps2, anneal):
    if not anneal:
        return [eps2]
    out = []
    e = top
    while e > eps2:
        out.append(e)
        e *= ANNEAL_FACTOR
    out.append(eps2)
    return out


def _sinkhorn_loop(la, lb, C, f, g, eps2, rho2, stop, budget, active):
    """Plain iterations until the sup-norm change drops below ``stop``."""
    B = la.shape[0]
    steps = np.zeros(B, dtype=int)
    converged = np.zeros(B, dtype=bool)
    live = active & (budget > 0)
    while np.any(live):
        fn, gn = _sinkhorn_step(la, lb, C, f, g, eps2, rho2)
        change = np.maximum(np.max(np.abs(fn - f), axis=1), np.max(np.abs(gn - g), axis=1))
        f = np.where(live[:, None], fn, f)
        g = np.where(live[:, None], gn, g)
        steps[live] += 1
        done = live & (change <= stop)
        converged |= done
        live &= ~done & (steps < budget)
    return f, g, steps, converged


def _solve_batch(a, b, C, cfg: SinkhornConfig, init=None):
    """Solve ``B`` independent problems of equal shape.

    Returns ``(f, g, iterations, converged)`` with per-element counters.
    """
    with np.errstate(divide="ignore", over="ignore", under="ignore", invalid="ignore"):
        return _solve_batch_inner(a, b, C, cfg, init)


def _solve_batch_inner(a, b, C, cfg, init):
    target, rho2 = cfg.entropic_strength, cfg.marginal_strength
    la, lb = np.log(a), np.log(b)
    B = la.shape[0]
    stop = cfg.tol * cfg.epsilon
    if init is not None:
        f = np.array(init[0], dtype=float).reshape(la.shape)
        g = np.array(init[1], dtype=float).reshape(lb.shape)
        schedules = [[target]] * B
    else:
        f = np.zeros_like(la)
        g = np.zeros_like(lb)
        tops = np.max(C, axis=(1, 2)) if C.size else np.zeros(B)
        schedules = [_stages(float(top), target, cfg.anneal) for top in tops]
    depth = max(len(s) for s in schedules)
    # right-align so that every element ends on the target value together
    grid = np.full((B, depth), np.nan)
    for k, s in enumerate(schedules):
        grid[k, depth - len(s):] = s
    iters = np.zeros(B, dtype=int)
    full = np.ones(B, dtype=bool)

    for col in range(depth - 1):
        active = np.isfinite(grid[:, col])
        eps2 = np.where(active, grid[:, col], target)
        for _ in range(SINKHORN_STEPS_PER_STAGE):
            fn, gn = _sinkhorn_step(la, lb, C, f, g, eps2, rho2)
            f = np.where(active[:, None], fn, f)
            g = np.where(active[:, None], gn, g)
        iters += SINKHORN_STEPS_PER_STAGE * active
        if cfg.newton:
            fn, gn, k, _, usable = _newton(
                la, lb, C, f, g, eps2, rho2, 1e-3 * np.sqrt(eps2), np.full(B, NEWTON_STEPS_PER_STAGE), active
            )
            iters += k
            keep = active & usable
            f = np.where(keep[:, None], fn, f)
            g = np.where(keep[:, None], gn, g)

    eps2 = np.full(B, target)
    budget = np.maximum(cfg.max_iter - iters, 1)
    converged = np.zeros(B, dtype=bool)
    if cfg.newton:
        f, g = _sinkhorn_step(la, lb, C, f, g, eps2, rho2)
        iters += 1
        budget -= 1
        fn, gn, k, conv, usable = _newton(la, lb, C, f, g, eps2, rho2, np.full(B, stop), np.maximum(budget, 1), full)
        iters += k
        budget -= k
        f = np.where(usable[:, None], fn, f)
        g = np.where(usable[:, None], gn, g)
        converged = usable & conv
    f, g, k, conv = _sinkhorn_loop(la, lb, C, f, g, eps2, rho2, stop, budget, ~converged)
    iters += k
    return f, g, iters, converged | conv


def _check_pair(a: WeightedPointSet, b: WeightedPointSet, cfg: SinkhornConfig):
    if len(a) == 0 or len(b) == 0:
        raise EmptyDistributionError("empty point set")
    if a.dim != b.dim:
        raise InvalidInputError(f"dimension mismatch: {a.dim} vs {b.dim}")
    if np.any(a.weights <= 0) or np.any(b.weights <= 0):
        raise InvalidInputError("solver requires strictly positive weights; normalize first")
    if cfg.balanced and not math.isclose(a.mass, b.mass, rel_tol=1e-9):
        raise InvalidInputError(f"balanced transport needs equal masses, got {a.mass} and {b.mass}")


def _log_plan(a, b, C, f, g, eps2):
    """Batched log-plan; all arguments carry a leading batch axis."""
    return np.log(a)[:, :, None] + np.log(b)[:, None, :] + (f[:, :, None] + g[:, None, :] - C) / eps2


def _summarize(a, b, C, f, g, cfg, iters, converged):
    eps2, rho2 = cfg.entropic_strength, cfg.marginal_strength
    with np.errstate(under="ignore"):
        P = np.exp(_log_plan(a, b, C, f, g, eps2))
    transport = (P * C).sum(axis=(1, 2))
    # KL(P | a x b) with log(P / ab) = (f + g - C) / eps2 taken exactly
    kl_joint = (
        (P * (f[:, :, None] + g[:, None, :] - C)).sum(axis=(1, 2))
        - eps2 * P.sum(axis=(1, 2))
        + eps2 * a.sum(axis=1) * b.sum(axis=1)
    )
    if cfg.balanced:
        kl_row = kl_col = np.zeros(len(a))
    else:
        kl_row = rho2 * kl_div(P.sum(axis=2), a).sum(axis=1)
        kl_col = rho2 * kl_div(P.sum(axis=1), b).sum(axis=1)
    total = transport + kl_joint + kl_row + kl_col
    out = [
        TransportSummary(
            float(transport[k]), float(kl_joint[k]), float(kl_row[k]), float(kl_col[k]),
            float(total[k]), int(iters[k]), bool(converged[k]),
        )
        for k in range(len(a))
    ]
    return out, P


@dataclass(frozen=True, eq=False)
class BatchSolution:
    """Results of :func:`solve_batch`; every array carries a leading batch axis."""

    summaries: list
    cost: np.ndarray
    plan: np.ndarray
    f: np.ndarray
    g: np.ndarray

    @property
    def totals(self) -> np.ndarray:
        return np.array([s.total for s in self.summaries])

    @property
    def converged(self) -> bool:
        return all(s.converged for s in self.summaries)


def solve_batch(x, a, y, b, cfg: SinkhornConfig = KEYPOINT_CONFIG) -> BatchSolution:
    """Solve ``B`` independent problems between clouds of common sizes at once.

    Parameters
    ----------
    x : array, shape (B, n, D)
    a : array, shape (B, n) or (n,)
        Strictly positive source weights, shared across the batch if 1-D.
    y : array, shape (B, m, D)
    b : array, shape (B, m) or (m,)

    Each element is solved exactly as :func:`sinkhorn_unbalanced` would solve
    it on its own; batching only amortises interpreter overhead.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.ndim != 3 or y.ndim != 3 or len(x) != len(y):
        raise InvalidInputError(f"expected (B, n, D) and (B, m, D) arrays, got {x.shape} and {y.shape}")
    B, n, _ = x.shape
    m = y.shape[1]
    if n == 0 or m == 0:
        raise EmptyDistributionError("empty point set")
    a = np.broadcast_to(np.asarray(a, dtype=float), (B, n)).copy()
    b = np.broadcast_to(np.asarray(b, dtype=float), (B, m)).copy()
    if np.any(a <= 0) or np.any(b <= 0) or not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise InvalidInputError("solver requires strictly positive finite weights; normalize first")
    if cfg.balanced and not np.allclose(a.sum(axis=1), b.sum(axis=1), rtol=1e-9, atol=0):
        raise InvalidInputError("balanced transport needs equal masses")
    summaries, C, P, f, g = _solve_points(x, a, y, b, cfg)
    return BatchSolution(summaries, C, P, f, g)


def _canonical_order(points, weights):
    """Lexicographic order of (coordinates, weight) rows.

    Solving in this order makes every output exactly invariant under a
    reordering of the input points, not just up to round-off.
    """
    keys = [weights] + [points[:, d] for d in range(points.shape[1] - 1, -1, -1)]
    return np.lexsort(keys)


def _solve_points(x, a, y, b, cfg, init=None):
    """Solve stacked problems in canonical point order and undo the reordering."""
    B = len(x)
    px = np.stack([_canonical_order(x[k], a[k]) for k in range(B)])
    py = np.stack([_canonical_order(y[k], b[k]) for k in range(B)])
    rows = np.arange(B)[:, None]
    xs, a_s, ys, bs = x[rows, px], a[rows, px], y[rows, py], b[rows, py]
    C = np.stack([cost_matrix(xs[k], ys[k], cfg.p_exponent) for k in range(B)])
    if init is not None:
        init = (np.asarray(init[0], dtype=float).reshape(a.shape)[rows, px],
                np.asarray(init[1], dtype=float).reshape(b.shape)[rows, py])
    f, g, iters, converged = _solve_batch(a_s, bs, C, cfg, init)
    summaries, P = _summarize(a_s, bs, C, f, g, cfg, iters, converged)
    ix, iy = np.argsort(px, axis=1), np.argsort(py, axis=1)
    C = np.take_along_axis(C[rows, ix], iy[:, None, :], axis=2)
    P = np.take_along_axis(P[rows, ix], iy[:, None, :], axis=2)
    return summaries, C, P, f[rows, ix], g[rows, iy]


def sinkhorn_unbalanced(a: WeightedPointSet, b: WeightedPointSet, cfg: SinkhornConfig = KEYPOINT_CONFIG, init=None):
    """Solve the entropic unbalanced problem between two weighted clouds.

    Parameters
    ----------
    a, b : WeightedPointSet
        Source and target clouds; weights must be strictly positive.
    cfg : SinkhornConfig
    init : DualPotentials, optional
        Warm start. Skips the annealing schedule.

    Returns
    -------
    summary : TransportSummary
        Objective terms evaluated on the plan implied by the potentials.
    potentials : DualPotentials
    """
    _check_pair(a, b, cfg)
    seed = None
    if init is not None:
        if np.shape(init.f) != (len(a),) or np.shape(init.g) != (len(b),):
            raise InvalidInputError("warm-start potentials do not match the inputs")
        seed = (init.f[None], init.g[None])
    summaries, _, _, f, g = _solve_points(a.points[None], a.weights[None], b.points[None], b.weights[None], cfg, seed)
    return summaries[0], DualPotentials(f[0], g[0])


def debiased_divergence(a: WeightedPointSet, b: WeightedPointSet, cfg: SinkhornConfig = KEYPOINT_CONFIG) -> float:
    """``OT(a, b) - OT(a, a) / 2 - OT(b, b) / 2``; zero when ``a`` and ``b`` coincide."""
    if not math.isclose(a.mass, b.mass, rel_tol=1e-9):
        warnings.warn(
            f"debiasing clouds of unequal mass ({a.mass:.6g} vs {b.mass:.6g}); no mass correction applied",
            stacklevel=2,
        )
    ab, _ = sinkhorn_unbalanced(a, b, cfg)
    aa, _ = sinkhorn_unbalanced(a, a, cfg)
    bb, _ = sinkhorn_unbalanced(b, b, cfg)
    return ab.total - 0.5 * aa.total - 0.5 * bb.total


def transport_plan(a: WeightedPointSet, b: WeightedPointSet, potentials: DualPotentials, cfg: SinkhornConfig) -> np.ndarray:
    """Materialise the plan ``a_i b_j exp((f_i + g_j - C_ij) / eps**2)``."""
    f, g = np.asarray(potentials.f), np.asarray(potentials.g)
    if f.shape != (len(a),) or g.shape != (len(b),):
        raise InvalidInputError(
            f"potentials of sizes {f.shape}, {g.shape} do not match clouds of sizes {len(a)}, {len(b)}"
        )
    C = cost_matrix(a, b, cfg.p_exponent)
    with np.errstate(under="ignore"):
        log_plan = _log_plan(a.weights[None], b.weights[None], C[None], f[None], g[None], cfg.entropic_strength)
        return np.exp(log_plan[0])


def plan_marginals(plan):
    plan = np.asarray(plan, dtype=float)
    return plan.sum(axis=1), plan.sum(axis=0)


def uot_objective(plan, a: WeightedPointSet, b: WeightedPointSet, cfg: SinkhornConfig) -> float:
    """Evaluate the transport objective directly on an arbitrary nonnegative plan."""
    plan = np.asarray(plan, dtype=float)
    C = cost_matrix(a, b, cfg.p_exponent)
    value = np.sum(plan * C) + cfg.entropic_strength * np.sum(kl_div(plan, np.outer(a.weights, b.weights)))
    if not cfg.balanced:
        r, c = plan_marginals(plan)
        value += cfg.marginal_strength * (np.sum(kl_div(r, a.weights)) + np.sum(kl_div(c, b.weights)))
    return float(value)
