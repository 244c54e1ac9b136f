"""Distillation losses between teacher and student local predictions.

Three losses are provided: a cell-to-cell baseline that only compares cells
active in both networks, a per-corner transport loss for keypoint votes, and
a transport loss for pooled dense binary codes. The transport losses come with
analytic gradients obtained by the envelope argument: at the optimum the plan
can be held fixed while differentiating the objective.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyDistributionError, InvalidInputError
from .predictions import (
    WEIGHT_FLOOR,
    DenseCodePredictionSet,
    KeypointPredictionSet,
    normalize_weights,
    pool_dense,
)
from .sinkhorn import (
    DENSE_CONFIG,
    KEYPOINT_CONFIG,
    BatchSolution,
    SinkhornConfig,
    solve_batch,
)

__all__ = [
    "DistillLossReport",
    "LossGradient",
    "LossPreset",
    "PRESETS",
    "NAIVE_THRESHOLD",
    "VOTE_MAGNITUDE_BOUND",
    "naive_kd_loss",
    "keypoint_kd_loss",
    "binary_code_kd_loss",
    "pooled_code_loss",
    "vote_cloud_loss",
    "loss_gradient",
    "loss_and_gradient",
    "teacher_self_terms",
    "thread_count",
]

NAIVE_THRESHOLD = 0.5
VOTE_MAGNITUDE_BOUND = 10.0


@dataclass(frozen=True)
class DistillLossReport:
    """Scalar loss plus what went into it.

    ``per_corner`` is filled for the keypoint loss only and ``matched_cells``
    for the naive loss only. ``summaries`` lists the cross solves first, then
    the student and teacher self solves when debiasing.
    """

    total: float
    per_corner: tuple = ()
    summaries: tuple = field(default=(), repr=False)
    matched_cells: int = 0
    converged: bool = True
    mass_mismatch: bool = False

    def to_dict(self) -> dict:
        return {
            "total": self.total,
            "per_corner": list(self.per_corner),
            "matched_cells": self.matched_cells,
            "converged": self.converged,
            "mass_mismatch": self.mass_mismatch,
            "summaries": [
                {
                    "transport_cost": s.transport_cost,
                    "kl_joint": s.kl_joint,
                    "kl_row": s.kl_row,
                    "kl_col": s.kl_col,
                    "total": s.total,
                    "iterations": s.iterations,
                    "converged": s.converged,
                }
                for s in self.summaries
            ],
        }


@dataclass(frozen=True, eq=False)
class LossGradient:
    """Derivatives of a loss with respect to the student.

    For keypoint losses ``d_points`` has the shape of the student's votes,
    ``(N, K, 2)``, and ``d_weights`` is taken with respect to the raw cell
    scores. For the dense loss both refer to the pooled cloud: ``d_points`` is
    ``(tiles, code_dim + 2)`` and ``d_weights`` is with respect to the pooled
    scores before normalization.
    """

    d_points: np.ndarray
    d_weights: np.ndarray
    converged: bool = True


@dataclass(frozen=True)
class LossPreset:
    kind: str
    epsilon: float
    rho: float
    weight: float

    def config(self, base: SinkhornConfig | None = None) -> SinkhornConfig:
        base = base or (KEYPOINT_CONFIG if self.kind == "ot-keypoint" else DENSE_CONFIG)
        return base.replace(epsilon=self.epsilon, rho=self.rho)


PRESETS = {
    "linemod-kp": LossPreset("ot-keypoint", 1e-3, 0.5, 5.0),
    "occ-kp": LossPreset("ot-keypoint", 1e-3, 0.5, 0.1),
    "zebrapose": LossPreset("ot-dense", 1e-4, 0.1, 100.0),
}


def thread_count() -> int:
    """Worker threads for independent solves, from ``OTKD_THREADS``.

    Unset means serial; ``0`` means one per CPU.
    """
    raw = os.environ.get("OTKD_THREADS", "").strip()
    if not raw:
        return 1
    try:
        n = int(raw)
    except ValueError:
        raise InvalidInputError(f"OTKD_THREADS must be an integer, got {raw!r}") from None
    if n < 0:
        raise InvalidInputError("OTKD_THREADS must be >= 0")
    return n if n > 0 else (os.cpu_count() or 1)


def _solve(x, a, y, b, cfg) -> BatchSolution:
    """``solve_batch`` split over worker threads; results do not depend on the split."""
    workers = min(thread_count(), len(x))
    if workers <= 1:
        return solve_batch(x, a, y, b, cfg)
    chunks = np.array_split(np.arange(len(x)), workers)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        parts = list(pool.map(lambda idx: solve_batch(x[idx], a, y[idx], b, cfg), chunks))
    return BatchSolution(
        [s for part in parts for s in part.summaries],
        np.concatenate([p.cost for p in parts]),
        np.concatenate([p.plan for p in parts]),
        np.concatenate([p.f for p in parts]),
        np.concatenate([p.g for p in parts]),
    )


# -- naive cell-to-cell ----------------------------------------------------


def _active_index(kps: KeypointPredictionSet, threshold: float, side: str) -> dict:
    index = {}
    for i, (xy, score) in enumerate(zip(map(tuple, kps.cell_xy), kps.scores)):
        if score >= threshold:
            if xy in index:
                raise InvalidInputError(f"{side}: duplicate active cell at grid position {xy}")
            index[xy] = i
    return index


def _naive_pairs(student, teacher, threshold):
    if student.num_keypoints != teacher.num_keypoints:
        raise InvalidInputError(f"keypoint count mismatch: {student.num_keypoints} vs {teacher.num_keypoints}")
    s_idx = _active_index(student, threshold, "student")
    t_idx = _active_index(teacher, threshold, "teacher")
    shared = [xy for xy in s_idx if xy in t_idx]
    return np.array([s_idx[xy] for xy in shared], dtype=int), np.array([t_idx[xy] for xy in shared], dtype=int)


def naive_kd_loss(student: KeypointPredictionSet, teacher: KeypointPredictionSet, p: int = 2,
                  threshold: float = NAIVE_THRESHOLD) -> DistillLossReport:
    """Sum of ``||v_s - v_t||_p`` over all corners of the cells active in both sets.

    Cells are matched by grid coordinates; a cell is active when its score is
    at least ``threshold``. No shared cells gives a zero loss.
    """
    if p not in (1, 2):
        raise InvalidInputError(f"p must be 1 or 2, got {p}")
    si, ti = _naive_pairs(student, teacher, threshold)
    if len(si) == 0:
        return DistillLossReport(0.0, matched_cells=0)
    diff = student.votes[si] - teacher.votes[ti]
    dist = np.linalg.norm(diff, ord=p, axis=-1)
    return DistillLossReport(math.fsum(dist.ravel()), matched_cells=len(si))


def _naive_gradient(student, teacher, p, threshold) -> LossGradient:
    d_points = np.zeros(student.votes.shape)
    si, ti = _naive_pairs(student, teacher, threshold)
    if len(si):
        diff = student.votes[si] - teacher.votes[ti]
        if p == 1:
            d_points[si] = np.sign(diff)
        else:
            norm = np.linalg.norm(diff, axis=-1, keepdims=True)
            d_points[si] = np.divide(diff, norm, out=np.zeros_like(diff), where=norm > 0)
    # scores only enter through a hard threshold
    return LossGradient(d_points, np.zeros(len(student)))


# -- transport losses on stacks of clouds ----------------------------------


def _prepare_weights(weights, mode, floor, side):
    weights = np.asarray(weights, dtype=float)
    if mode == "raw":
        keep = weights > 0
        if not np.any(keep):
            raise EmptyDistributionError("all weights are zero", side=side)
        return weights[keep], keep
    try:
        return normalize_weights(weights, mode=mode, floor=floor)
    except EmptyDistributionError as exc:
        raise EmptyDistributionError(str(exc), side=side) from None


def _unit_vectors(diff, cost, p):
    if p == 1:
        return np.sign(diff)
    return np.divide(diff, cost[..., None], out=np.zeros_like(diff), where=cost[..., None] > 0)


def _weight_gradient(sol: BatchSolution, a, b, cfg, both_sides: bool):
    """Envelope derivative of each solve's optimal value in the source weights."""
    eps2, rho2 = cfg.entropic_strength, cfg.marginal_strength
    P = sol.plan
    ratio_r = P.sum(axis=2) / a
    grad = eps2 * (b.sum() - ratio_r)
    if cfg.balanced:
        grad = grad + sol.f
    else:
        grad = grad + rho2 * (1.0 - ratio_r)
    if both_sides:
        # source and target are the same cloud
        ratio_c = P.sum(axis=1) / a
        grad = grad + eps2 * (a.sum() - ratio_c)
        grad = grad + (sol.g if cfg.balanced else rho2 * (1.0 - ratio_c))
    return grad


def teacher_self_terms(teacher_points, teacher_weights, cfg: SinkhornConfig) -> np.ndarray:
    """Per-cloud self-transport values of the teacher, which stay constant during training.

    ``teacher_points`` is ``(K, M, D)`` and ``teacher_weights`` the already
    prepared ``(M,)`` weights.
    """
    y = np.asarray(teacher_points, dtype=float)
    return _solve(y, teacher_weights, y, teacher_weights, cfg).totals


def _cloud_loss(x, a, y, b, cfg, want_grad, teacher_self=None):
    """Loss over K stacked cloud pairs sharing weights, and optionally its gradient.

    ``x`` is ``(K, N, D)`` with weights ``a`` (N,), ``y`` is ``(K, M, D)`` with
    weights ``b`` (M,). Returns ``(per_cloud, summaries, d_x, d_a, mismatch)``.
    """
    cross = _solve(x, a, y, b, cfg)
    per = cross.totals.copy()
    summaries = list(cross.summaries)
    mismatch = not math.isclose(a.sum(), b.sum(), rel_tol=1e-9)
    if cfg.debiased:
        xx = _solve(x, a, x, a, cfg)
        if teacher_self is None:
            yy = _solve(y, b, y, b, cfg)
            teacher_vals = yy.totals
            summaries += list(xx.summaries) + list(yy.summaries)
        else:
            teacher_vals = np.asarray(teacher_self, dtype=float)
            summaries += list(xx.summaries)
        per = per - 0.5 * xx.totals - 0.5 * teacher_vals
    if not want_grad:
        return per, summaries, None, None, mismatch
    p = cfg.p_exponent
    diff = x[:, :, None, :] - y[:, None, :, :]
    d_x = np.einsum("knm,knmd->knd", cross.plan, _unit_vectors(diff, cross.cost, p))
    d_a = _weight_gradient(cross, a, b, cfg, both_sides=False).sum(axis=0)
    if cfg.debiased:
        dself = x[:, :, None, :] - x[:, None, :, :]
        sym = xx.plan + np.swapaxes(xx.plan, 1, 2)
        d_x = d_x - 0.5 * np.einsum("kij,kijd->kid", sym, _unit_vectors(dself, xx.cost, p))
        d_a = d_a - 0.5 * _weight_gradient(xx, a, a, cfg, both_sides=True).sum(axis=0)
    return per, summaries, d_x, d_a, mismatch


def _chain_weights(d_alpha, raw, keep, mode):
    """Map a gradient in the prepared weights back to the raw weights."""
    out = np.zeros(len(raw))
    if mode == "raw":
        out[keep] = d_alpha
        return out
    kept = np.asarray(raw, dtype=float)[keep]
    total = kept.sum()
    alpha = kept / total
    out[keep] = (d_alpha - alpha @ d_alpha) / total
    return out


def _check_votes(kps, bound, side):
    if bound is not None and np.any(np.abs(kps.votes) > bound):
        raise InvalidInputError(
            f"{side}: votes exceed magnitude {bound}; keypoints must be normalized by the image size first"
        )


def _keypoint_clouds(student, teacher, mode, floor, bound):
    if student.num_keypoints != teacher.num_keypoints:
        raise InvalidInputError(f"keypoint count mismatch: {student.num_keypoints} vs {teacher.num_keypoints}")
    _check_votes(student, bound, "student")
    _check_votes(teacher, bound, "teacher")
    if len(student) == 0:
        raise EmptyDistributionError("no cells", side="student")
    if len(teacher) == 0:
        raise EmptyDistributionError("no cells", side="teacher")
    a, keep_s = _prepare_weights(student.scores, mode, floor, "student")
    b, keep_t = _prepare_weights(teacher.scores, mode, floor, "teacher")
    x = np.ascontiguousarray(np.swapaxes(student.votes[keep_s], 0, 1))
    y = np.ascontiguousarray(np.swapaxes(teacher.votes[keep_t], 0, 1))
    return x, a, keep_s, y, b


def _keypoint(student, teacher, cfg, mode, floor, bound, want_grad, teacher_self):
    x, a, keep_s, y, b = _keypoint_clouds(student, teacher, mode, floor, bound)
    per, summaries, d_x, d_a, mismatch = _cloud_loss(x, a, y, b, cfg, want_grad, teacher_self)
    converged = all(s.converged for s in summaries)
    report = DistillLossReport(
        math.fsum(per), tuple(float(v) for v in per), tuple(summaries),
        converged=converged, mass_mismatch=mismatch,
    )
    if not want_grad:
        return report, None
    d_points = np.zeros(student.votes.shape)
    d_points[keep_s] = np.swapaxes(d_x, 0, 1)
    grad = LossGradient(d_points, _chain_weights(d_a, student.scores, keep_s, mode), converged)
    return report, grad


def keypoint_kd_loss(student: KeypointPredictionSet, teacher: KeypointPredictionSet,
                     cfg: SinkhornConfig = KEYPOINT_CONFIG, *, mode: str = "unit-mass",
                     floor: float = WEIGHT_FLOOR, magnitude_bound: float | None = VOTE_MAGNITUDE_BOUND,
                     teacher_self=None) -> DistillLossReport:
    """Sum over corners of the transport loss between student and teacher votes.

    Each corner's votes form a cloud weighted by the cell scores; the same
    prepared weights are used for every corner. Votes must already be
    normalized by the image size: any coordinate larger than
    ``magnitude_bound`` in absolute value is rejected.

    ``teacher_self`` may carry precomputed :func:`teacher_self_terms` for the
    debiased loss.
    """
    report, _ = _keypoint(student, teacher, cfg, mode, floor, magnitude_bound, False, teacher_self)
    return report


def vote_cloud_loss(votes, weights, teacher: KeypointPredictionSet, cfg: SinkhornConfig = KEYPOINT_CONFIG, *,
                    mode: str = "unit-mass", floor: float = WEIGHT_FLOOR) -> float:
    """Keypoint loss as a function of raw student arrays.

    ``votes`` is ``(N, K, 2)`` and ``weights`` any nonnegative ``(N,)``; unlike
    cell scores they are not confined to [0, 1], so derivatives can be taken
    by differencing at the boundary.
    """
    votes = np.asarray(votes, dtype=float)
    if votes.ndim != 3 or votes.shape[1:] != (teacher.num_keypoints, 2):
        raise InvalidInputError(f"votes must be (n, {teacher.num_keypoints}, 2), got {votes.shape}")
    a, keep_s = _prepare_weights(weights, mode, floor, "student")
    b, keep_t = _prepare_weights(teacher.scores, mode, floor, "teacher")
    x = np.ascontiguousarray(np.swapaxes(votes[keep_s], 0, 1))
    y = np.ascontiguousarray(np.swapaxes(teacher.votes[keep_t], 0, 1))
    return math.fsum(_cloud_loss(x, a, y, b, cfg, False)[0])


def _dense_clouds(student, teacher, block, mode, floor):
    if tuple(student.grid_size) != tuple(teacher.grid_size):
        raise InvalidInputError(f"grid size mismatch: {student.grid_size} vs {teacher.grid_size}")
    if student.code_dim != teacher.code_dim:
        raise InvalidInputError(f"code dimension mismatch: {student.code_dim} vs {teacher.code_dim}")
    ps, pt = pool_dense(student, block), pool_dense(teacher, block)
    a, keep_s = _prepare_weights(ps.weights, mode, floor, "student")
    b, keep_t = _prepare_weights(pt.weights, mode, floor, "teacher")
    return ps, keep_s, a, pt.points[keep_t][None], b


def _dense(student, teacher, cfg, block, mode, floor, want_grad):
    ps, keep_s, a, y, b = _dense_clouds(student, teacher, block, mode, floor)
    x = ps.points[keep_s][None]
    per, summaries, d_x, d_a, mismatch = _cloud_loss(x, a, y, b, cfg, want_grad)
    converged = all(s.converged for s in summaries)
    report = DistillLossReport(float(per[0]), (), tuple(summaries), converged=converged, mass_mismatch=mismatch)
    if not want_grad:
        return report, None
    d_points = np.zeros(ps.points.shape)
    d_points[keep_s] = d_x[0]
    return report, LossGradient(d_points, _chain_weights(d_a, ps.weights, keep_s, mode), converged)


def binary_code_kd_loss(student: DenseCodePredictionSet, teacher: DenseCodePredictionSet,
                        cfg: SinkhornConfig = DENSE_CONFIG, block: int = 8, *, mode: str = "unit-mass",
                        floor: float = WEIGHT_FLOOR) -> DistillLossReport:
    """Transport loss between the pooled, coordinate-augmented code clouds."""
    report, _ = _dense(student, teacher, cfg, block, mode, floor, False)
    return report


def pooled_code_loss(points, weights, teacher: DenseCodePredictionSet, cfg: SinkhornConfig = DENSE_CONFIG,
                     block: int = 8, *, mode: str = "unit-mass", floor: float = WEIGHT_FLOOR) -> float:
    """Dense loss as a function of an already pooled student cloud.

    This is the function whose derivatives the dense :class:`LossGradient`
    reports; it exists so they can be checked directly.
    """
    points = np.asarray(points, dtype=float)
    pt = pool_dense(teacher, block)
    if points.ndim != 2 or points.shape[1] != pt.dim:
        raise InvalidInputError(f"pooled points must be (n, {pt.dim}), got {points.shape}")
    a, keep_s = _prepare_weights(weights, mode, floor, "student")
    b, keep_t = _prepare_weights(pt.weights, mode, floor, "teacher")
    per = _cloud_loss(points[keep_s][None], a, pt.points[keep_t][None], b, cfg, False)[0]
    return float(per[0])


def loss_and_gradient(loss_kind: str, student, teacher, cfg: SinkhornConfig | None = None, *, p: int = 2,
                      block: int = 8, mode: str = "unit-mass", floor: float = WEIGHT_FLOOR,
                      magnitude_bound: float | None = VOTE_MAGNITUDE_BOUND, teacher_self=None):
    """Loss report and student gradient from a single set of solves.

    ``loss_kind`` is ``"naive"``, ``"ot-keypoint"`` or ``"ot-dense"``; ``p``
    is used by the naive loss only (the transport losses take it from ``cfg``).
    """
    if loss_kind == "naive":
        return naive_kd_loss(student, teacher, p), _naive_gradient(student, teacher, p, NAIVE_THRESHOLD)
    if loss_kind == "ot-keypoint":
        cfg = cfg or KEYPOINT_CONFIG
        return _keypoint(student, teacher, cfg, mode, floor, magnitude_bound, True, teacher_self)
    if loss_kind == "ot-dense":
        cfg = cfg or DENSE_CONFIG
        return _dense(student, teacher, cfg, block, mode, floor, True)
    raise InvalidInputError(f"unknown loss kind {loss_kind!r}")


def loss_gradient(loss_kind: str, student, teacher, cfg: SinkhornConfig | None = None, **kwargs) -> LossGradient:
    """Gradient of a distillation loss with respect to the student predictions.

    The teacher is treated as a constant. A solve that did not converge still
    yields a gradient, with ``converged`` set to False.
    """
    return loss_and_gradient(loss_kind, student, teacher, cfg, **kwargs)[1]
