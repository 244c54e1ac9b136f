"""Finite-difference checks of the analytic loss gradients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError
from .losses import (
    keypoint_kd_loss,
    loss_and_gradient,
    naive_kd_loss,
    pooled_code_loss,
    vote_cloud_loss,
)
from .predictions import DenseCodePredictionSet, KeypointPredictionSet, pool_dense
from .sinkhorn import DENSE_CONFIG, KEYPOINT_CONFIG, SinkhornConfig

__all__ = [
    "GradCheckResult",
    "central_differences",
    "relative_errors",
    "check_gradient",
    "random_keypoint_pair",
    "random_dense_pair",
]

FD_STEP = 1e-5
RTOL = 1e-4
ATOL = 1e-7


@dataclass(frozen=True)
class GradCheckResult:
    """Worst disagreement between analytic and finite-difference derivatives.

    ``max_rel_error`` is ``max |analytic - fd| / max(|fd|, atol / rtol)``, so
    the check passes iff every component is within ``rtol`` relative or
    ``atol`` absolute. When the check fails, ``refined_rel_error`` repeats
    the worst component with a step 100 times smaller: agreement there means
    the loss bends on a scale finer than ``h`` (a smoothed kink of the
    transport value) rather than a wrong gradient. It does not change
    ``passed``.
    """

    loss: float
    max_rel_error: float
    max_abs_error: float
    components: int
    worst: str
    converged: bool
    rtol: float = RTOL
    refined_rel_error: float | None = None

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.rtol

    def to_dict(self) -> dict:
        return {
            "loss": self.loss,
            "max_rel_error": self.max_rel_error,
            "max_abs_error": self.max_abs_error,
            "components": self.components,
            "worst": self.worst,
            "converged": self.converged,
            "passed": self.passed,
            "refined_rel_error": self.refined_rel_error,
        }


def central_differences(fn, x0, h: float = FD_STEP) -> np.ndarray:
    """``(fn(x + h e_i) - fn(x - h e_i)) / 2h`` for every component of ``x0``."""
    x0 = np.asarray(x0, dtype=float)
    flat = x0.ravel()
    out = np.empty(flat.size)
    for i in range(flat.size):
        xp = flat.copy()
        xm = flat.copy()
        xp[i] += h
        xm[i] -= h
        out[i] = (fn(xp.reshape(x0.shape)) - fn(xm.reshape(x0.shape))) / (2 * h)
    return out.reshape(x0.shape)


def relative_errors(analytic, fd, rtol: float = RTOL, atol: float = ATOL) -> np.ndarray:
    analytic = np.asarray(analytic, dtype=float)
    fd = np.asarray(fd, dtype=float)
    return np.abs(analytic - fd) / np.maximum(np.abs(fd), atol / rtol)


def check_gradient(loss_kind: str, student, teacher, cfg: SinkhornConfig | None = None, *, p: int = 2,
                   block: int = 8, mode: str = "unit-mass", h: float = FD_STEP, rtol: float = RTOL,
                   atol: float = ATOL) -> GradCheckResult:
    """Compare :func:`loss_and_gradient` with central differences of the loss itself.

    Keypoint losses are differentiated in the votes and the raw cell scores;
    the dense loss in the pooled student points and pooled scores, which is
    what its gradient refers to.
    """
    if loss_kind == "ot-keypoint":
        cfg = cfg or KEYPOINT_CONFIG
        report, grad = loss_and_gradient(loss_kind, student, teacher, cfg, mode=mode)
        blocks = [
            ("votes", student.votes, grad.d_points,
             lambda v: keypoint_kd_loss(student.replace(votes=v), teacher, cfg, mode=mode).total),
            ("scores", student.scores, grad.d_weights,
             lambda s: vote_cloud_loss(student.votes, s, teacher, cfg, mode=mode)),
        ]
    elif loss_kind == "ot-dense":
        cfg = cfg or DENSE_CONFIG
        report, grad = loss_and_gradient(loss_kind, student, teacher, cfg, block=block, mode=mode)
        pooled = pool_dense(student, block)
        blocks = [
            ("points", pooled.points, grad.d_points,
             lambda x: pooled_code_loss(x, pooled.weights, teacher, cfg, block, mode=mode)),
            ("weights", pooled.weights, grad.d_weights,
             lambda w: pooled_code_loss(pooled.points, w, teacher, cfg, block, mode=mode)),
        ]
    elif loss_kind == "naive":
        report, grad = loss_and_gradient(loss_kind, student, teacher, p=p)
        blocks = [
            ("votes", student.votes, grad.d_points,
             lambda v: naive_kd_loss(student.replace(votes=v), teacher, p).total),
        ]
    else:
        raise InvalidInputError(f"unknown loss kind {loss_kind!r}")
    worst_rel, worst_abs, worst, count, where = 0.0, 0.0, "", 0, None
    for name, x0, analytic, fn in blocks:
        fd = central_differences(fn, x0, h)
        rel = relative_errors(analytic, fd, rtol, atol)
        count += rel.size
        if rel.size == 0:
            continue
        idx = np.unravel_index(int(np.argmax(rel)), rel.shape)
        if rel[idx] >= worst_rel:
            worst_rel = float(rel[idx])
            worst = f"{name}{list(map(int, idx))}"
            where = (x0, analytic, fn, idx)
        worst_abs = max(worst_abs, float(np.max(np.abs(np.asarray(analytic) - fd))))
    refined = None
    if worst_rel > rtol:
        x0, analytic, fn, idx = where
        x0 = np.asarray(x0, dtype=float)
        hr = h / 100
        xp, xm = x0.copy(), x0.copy()
        xp[idx] += hr
        xm[idx] -= hr
        fd = (fn(xp) - fn(xm)) / (2 * hr)
        refined = float(relative_errors(np.asarray(analytic)[idx], fd, rtol, atol))
    return GradCheckResult(float(report.total), worst_rel, worst_abs, count, worst, bool(grad.converged), rtol,
                           refined)


def random_keypoint_pair(rng: np.random.Generator, max_cells: int = 8, num_keypoints: int = 8,
                         sigma_student: float = 0.05, sigma_teacher: float = 0.02):
    """Normalized student and teacher vote sets around shared random corners.

    Cell counts are drawn independently in ``[1, max_cells]`` and scores in
    ``[0.3, 1]``.
    """
    corners = rng.random((num_keypoints, 2))
    sets = []
    for sigma in (sigma_student, sigma_teacher):
        n = int(rng.integers(1, max_cells + 1))
        cells = rng.choice(max_cells * max_cells, size=n, replace=False)
        xy = np.stack([cells % max_cells, cells // max_cells], axis=1)
        votes = corners + rng.normal(0.0, sigma, (n, num_keypoints, 2))
        sets.append(KeypointPredictionSet((1.0, 1.0), num_keypoints, xy, rng.uniform(0.3, 1.0, n), votes))
    return tuple(sets)


def random_dense_pair(rng: np.random.Generator, grid: int = 16, code_dim: int = 16, noise: float = 0.3):
    """Teacher with crisp bits in ``{0.05, 0.95}`` and a noisy student copy."""
    crisp = np.where(rng.random((grid, grid, code_dim)) < 0.5, 0.05, 0.95)
    teacher = DenseCodePredictionSet((grid, grid), code_dim, rng.uniform(0.5, 1.0, (grid, grid)), crisp)
    noisy = np.clip(crisp + rng.uniform(-noise, noise, crisp.shape), 0.0, 1.0)
    student = DenseCodePredictionSet((grid, grid), code_dim, rng.uniform(0.5, 1.0, (grid, grid)), noisy)
    return student, teacher

