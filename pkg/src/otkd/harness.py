"""Synthetic teacher/student distillation experiments.

A teacher is a set of cells voting tightly for the eight projected corners of
a box, plus a few low-confidence outliers. A student is a free set of votes
and score logits, initialised loosely around the same corners, and trained by
gradient descent on one of the distillation losses alone.
"""

from __future__ import annotations

import csv
import io
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from itertools import product

import numpy as np
from scipy.special import expit, logit

from .errors import InvalidInputError
from .losses import (
    _keypoint_clouds,
    keypoint_kd_loss,
    loss_and_gradient,
    teacher_self_terms,
    thread_count,
)
from .predictions import KeypointPredictionSet
from .sinkhorn import KEYPOINT_CONFIG, SinkhornConfig

__all__ = [
    "SyntheticScenario",
    "StudentModel",
    "TrajectoryRecord",
    "DistillTrajectory",
    "DEFAULT_CORNERS",
    "DEFAULT_SWEEP_GRID",
    "generate_teacher",
    "init_student",
    "train_student",
    "evaluate",
    "mean_corner_error",
    "sweep",
    "trajectory_csv",
    "scatter_csv",
    "sweep_csv",
]


def _project_box():
    # corners of a box rotated about two axes, seen by a pinhole camera
    corners = np.array(list(product((-1.0, 1.0), repeat=3))) * np.array([0.12, 0.09, 0.07])
    a, b = 0.5, 0.35
    rx = np.array([[1, 0, 0], [0, math.cos(a), -math.sin(a)], [0, math.sin(a), math.cos(a)]])
    ry = np.array([[math.cos(b), 0, math.sin(b)], [0, 1, 0], [-math.sin(b), 0, math.cos(b)]])
    cam = corners @ (ry @ rx).T + np.array([0.0, 0.0, 0.6])
    uv = 0.6 * cam[:, :2] / cam[:, 2:] + 0.5
    return np.round(uv, 6)


DEFAULT_CORNERS = _project_box()
DEFAULT_CORNERS.setflags(write=False)


@dataclass(frozen=True)
class SyntheticScenario:
    seed: int = 0
    gt_corners: tuple = tuple(map(tuple, DEFAULT_CORNERS))
    n_teacher: int = 20
    n_student: int = 15
    sigma_teacher: float = 0.005
    sigma_student_init: float = 0.05
    outlier_fraction: float = 0.1
    cell_overlap: float = 0.5

    def __post_init__(self):
        corners = np.asarray(self.gt_corners, dtype=float)
        if corners.ndim != 2 or corners.shape[1] != 2 or len(corners) < 1:
            raise InvalidInputError("gt_corners must be a (K, 2) array")
        if self.n_teacher < 1 or self.n_student < 1:
            raise InvalidInputError("cell counts must be >= 1")
        if not (self.sigma_teacher >= 0 and self.sigma_student_init >= 0):
            raise InvalidInputError("sigmas must be nonnegative")
        if not 0 <= self.outlier_fraction < 1:
            raise InvalidInputError("outlier_fraction must lie in [0, 1)")
        if not 0 <= self.cell_overlap <= 1:
            raise InvalidInputError("cell_overlap must lie in [0, 1]")
        object.__setattr__(self, "gt_corners", tuple(map(tuple, corners.tolist())))

    @property
    def corners(self) -> np.ndarray:
        return np.array(self.gt_corners)

    @property
    def num_keypoints(self) -> int:
        return len(self.gt_corners)

    @property
    def n_outliers(self) -> int:
        return math.floor(self.outlier_fraction * self.n_teacher)

    def replace(self, **changes) -> "SyntheticScenario":
        return replace(self, **changes)


@dataclass(frozen=True, eq=False)
class StudentModel:
    """Free student parameters: votes ``(n, K, 2)`` and per-cell score logits."""

    votes: np.ndarray
    score_logits: np.ndarray
    cell_xy: np.ndarray

    @property
    def scores(self) -> np.ndarray:
        return expit(self.score_logits)

    def predictions(self) -> KeypointPredictionSet:
        return KeypointPredictionSet((1.0, 1.0), self.votes.shape[1], self.cell_xy, self.scores, self.votes)


@dataclass(frozen=True)
class TrajectoryRecord:
    step: int
    loss: float
    divergence: float
    corner_error: float
    wallclock_ms: float


@dataclass(frozen=True, eq=False)
class DistillTrajectory:
    """Record ``k`` describes the student after ``k`` updates; ``initial`` before any."""

    loss_kind: str
    initial: TrajectoryRecord
    records: list
    initial_model: StudentModel
    final_model: StudentModel
    failed: bool = False
    message: str = ""

    @property
    def final(self) -> TrajectoryRecord:
        return self.records[-1] if self.records else self.initial


def _rngs(seed):
    teacher, student = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(teacher), np.random.default_rng(student)


def _grid_side(s: SyntheticScenario) -> int:
    return max(4, math.ceil(math.sqrt(2 * (s.n_teacher + s.n_student))))


def generate_teacher(s: SyntheticScenario) -> KeypointPredictionSet:
    """Tight teacher votes around the ground-truth corners.

    Cells sit at distinct grid positions. The last ``floor(outlier_fraction *
    n_teacher)`` cells are outliers: every vote is displaced by more than ten
    teacher spreads and the score is drawn from ``[0, 0.3]``.
    """
    rng, _ = _rngs(s.seed)
    side = _grid_side(s)
    cells = rng.choice(side * side, size=s.n_teacher, replace=False)
    cell_xy = np.stack([cells % side, cells // side], axis=1)
    k = s.num_keypoints
    votes = s.corners[None] + rng.normal(0.0, 1.0, (s.n_teacher, k, 2)) * s.sigma_teacher
    scores = rng.uniform(0.7, 1.0, s.n_teacher)
    n_out = s.n_outliers
    if n_out:
        angle = rng.uniform(0.0, 2 * math.pi, (n_out, k))
        dist = 10.0 * s.sigma_teacher + rng.uniform(0.1, 0.3, (n_out, k))
        shift = np.stack([np.cos(angle), np.sin(angle)], axis=-1) * dist[..., None]
        votes[-n_out:] = s.corners[None] + shift
        scores[-n_out:] = rng.uniform(0.0, 0.3, n_out)
    return KeypointPredictionSet((1.0, 1.0), k, cell_xy, scores, votes)


def init_student(s: SyntheticScenario, teacher: KeypointPredictionSet | None = None) -> StudentModel:
    """Loose student votes; ``round(cell_overlap * n_student)`` cells reuse teacher grid positions."""
    teacher = teacher if teacher is not None else generate_teacher(s)
    _, rng = _rngs(s.seed)
    side = _grid_side(s)
    teacher_cells = teacher.cell_xy[:, 1] * side + teacher.cell_xy[:, 0]
    n_shared = min(round(s.cell_overlap * s.n_student), len(teacher_cells))
    free = np.setdiff1d(np.arange(side * side), teacher_cells)
    shared = rng.choice(teacher_cells, size=n_shared, replace=False)
    own = rng.choice(free, size=s.n_student - n_shared, replace=False)
    cells = np.concatenate([shared, own])
    cell_xy = np.stack([cells % side, cells // side], axis=1)
    votes = s.corners[None] + rng.normal(0.0, 1.0, (s.n_student, s.num_keypoints, 2)) * s.sigma_student_init
    logits = logit(rng.uniform(0.7, 0.95, s.n_student))
    return StudentModel(votes, logits, cell_xy)


def mean_corner_error(votes, scores, corners) -> float:
    """Mean over corners of the distance from the score-weighted vote centroid to the corner."""
    scores = np.asarray(scores, dtype=float)
    centroid = np.einsum("i,ikd->kd", scores, votes) / scores.sum()
    return float(np.mean(np.linalg.norm(centroid - corners, axis=1)))


def evaluate(model: StudentModel, s: SyntheticScenario, teacher: KeypointPredictionSet | None = None):
    """``(mean_corner_error, divergence_to_teacher)`` with the keypoint loss at its default setting."""
    if model.votes.shape[1:] != (s.num_keypoints, 2):
        raise InvalidInputError("model does not match the scenario's keypoint count")
    teacher = teacher if teacher is not None else generate_teacher(s)
    err = mean_corner_error(model.votes, model.scores, s.corners)
    div = keypoint_kd_loss(model.predictions(), teacher, KEYPOINT_CONFIG).total
    return err, div


class _Objective:
    """Loss, gradient and reference divergence for one run, with the constant teacher terms cached."""

    def __init__(self, loss_kind, cfg, teacher, p):
        self.loss_kind, self.cfg, self.teacher, self.p = loss_kind, cfg, teacher, p
        self._self_cache = {}
        self._div_cache = None

    def _teacher_self(self, cfg, student):
        if not cfg.debiased:
            return None
        key = cfg
        if key not in self._self_cache:
            _, _, _, y, b = _keypoint_clouds(student, self.teacher, "unit-mass", 1e-6, None)
            self._self_cache[key] = teacher_self_terms(y, b, cfg)
        return self._self_cache[key]

    def loss_grad(self, model: StudentModel):
        student = model.predictions()
        if self.loss_kind == "naive":
            report, grad = loss_and_gradient("naive", student, self.teacher, p=self.p)
        else:
            report, grad = loss_and_gradient(
                "ot-keypoint", student, self.teacher, self.cfg, teacher_self=self._teacher_self(self.cfg, student)
            )
        d_logits = grad.d_weights * model.scores * (1.0 - model.scores)
        return report.total, grad.d_points, d_logits

    def divergence(self, model: StudentModel, loss: float):
        if self.loss_kind != "naive" and self.cfg == KEYPOINT_CONFIG:
            return loss
        key = (model.votes.tobytes(), model.score_logits.tobytes())
        if self._div_cache is not None and self._div_cache[0] == key:
            return self._div_cache[1]
        student = model.predictions()
        value = keypoint_kd_loss(
            student, self.teacher, KEYPOINT_CONFIG, teacher_self=self._teacher_self(KEYPOINT_CONFIG, student)
        ).total
        self._div_cache = (key, value)
        return value


def train_student(
    s: SyntheticScenario,
    loss_kind: str = "ot-keypoint",
    cfg: SinkhornConfig = KEYPOINT_CONFIG,
    steps: int = 500,
    step_size: float = 0.05,
    momentum: float = 0.9,
    p: int = 2,
    max_backtracks: int = 8,
    growth: float = 1.25,
    clock=time.perf_counter,
    init: StudentModel | None = None,
) -> DistillTrajectory:
    """Train a free student against the teacher with one distillation loss.

    Each update is a heavy-ball step with the current step size. If it would
    increase the loss, the momentum is dropped and the step size halved, up to
    ``max_backtracks`` times; if none helps the student stays put for that
    step. The step size carries over to later steps and grows by ``growth``
    after every accepted step, capped at ``step_size``, so a run near a sharp
    minimum does not re-pay the full backtracking search each step. The
    recorded loss is therefore nonincreasing.

    ``init`` replaces the scenario's initial student; its keypoint count
    must match the scenario.
    """
    if loss_kind not in ("naive", "ot-keypoint"):
        raise InvalidInputError(f"loss_kind must be 'naive' or 'ot-keypoint', got {loss_kind!r}")
    if steps < 1:
        raise InvalidInputError("steps must be >= 1")
    teacher = generate_teacher(s)
    model = init_student(s, teacher) if init is None else init
    if model.votes.shape[1:] != (s.num_keypoints, 2) or model.score_logits.shape != model.votes.shape[:1]:
        raise InvalidInputError("initial model does not match the scenario")
    initial_model = model
    objective = _Objective(loss_kind, cfg, teacher, p)
    start = clock()

    def record(step, m, loss):
        err = mean_corner_error(m.votes, m.scores, s.corners)
        return TrajectoryRecord(step, loss, objective.divergence(m, loss), err, (clock() - start) * 1e3)

    loss, d_votes, d_logits = objective.loss_grad(model)
    initial = record(0, model, loss)
    records = []
    vel_v = np.zeros_like(model.votes)
    vel_l = np.zeros_like(model.score_logits)
    current = step_size
    for step in range(1, steps + 1):
        new_v = momentum * vel_v - current * d_votes
        new_l = momentum * vel_l - current * d_logits
        accepted = None
        for _ in range(max_backtracks + 1):
            trial = StudentModel(model.votes + new_v, model.score_logits + new_l, model.cell_xy)
            if not (np.all(np.isfinite(trial.votes)) and np.all(np.isfinite(trial.score_logits))):
                result = None
            else:
                result = objective.loss_grad(trial)
            if result is not None and np.isfinite(result[0]) and result[0] <= loss:
                accepted = (trial, result, new_v, new_l)
                break
            current *= 0.5
            new_v = -current * d_votes
            new_l = -current * d_logits
        if accepted is None:
            vel_v = np.zeros_like(vel_v)
            vel_l = np.zeros_like(vel_l)
        else:
            model, (loss, d_votes, d_logits), vel_v, vel_l = accepted
            current = min(current * growth, step_size)
        if not np.isfinite(loss):
            return DistillTrajectory(loss_kind, initial, records, initial_model, model, True,
                                     f"non-finite loss at step {step}")
        records.append(record(step, model, loss))
    return DistillTrajectory(loss_kind, initial, records, initial_model, model)


DEFAULT_SWEEP_GRID = {
    "loss_kind": ["naive", "ot-keypoint"],
    "epsilon": [1e-3, 1e-2],
    "rho": [0.1, 0.5, 1.0],
    "step_size": [0.05],
}

SWEEP_COLUMNS = [
    "loss_kind", "epsilon", "rho", "step_size", "steps",
    "initial_loss", "final_loss", "initial_divergence", "final_divergence",
    "initial_corner_error", "final_corner_error", "failed",
]


def sweep(base: SyntheticScenario, grid: dict | None = None, steps: int = 200, cfg: SinkhornConfig = KEYPOINT_CONFIG):
    """Train one student per grid point and collect final metrics.

    ``grid`` maps any of ``loss_kind``, ``epsilon``, ``rho``, ``step_size`` to
    lists of values; missing keys take a single default. Rows follow the
    Cartesian product in that key order. A run that raises or diverges yields
    a row with ``failed`` set.
    """
    grid = dict(DEFAULT_SWEEP_GRID if grid is None else grid)
    unknown = set(grid) - set(DEFAULT_SWEEP_GRID)
    if unknown:
        raise InvalidInputError(f"unknown sweep keys {sorted(unknown)}")
    axes = {
        "loss_kind": list(grid.get("loss_kind", ["ot-keypoint"])),
        "epsilon": list(grid.get("epsilon", [cfg.epsilon])),
        "rho": list(grid.get("rho", [cfg.rho])),
        "step_size": list(grid.get("step_size", [0.05])),
    }
    if any(len(v) == 0 for v in axes.values()):
        raise InvalidInputError("every sweep axis needs at least one value")
    points = list(product(*axes.values()))

    def run(point):
        kind, eps, rho, step_size = point
        row = dict(loss_kind=kind, epsilon=eps, rho=rho, step_size=step_size, steps=steps)
        try:
            traj = train_student(base, kind, cfg.replace(epsilon=eps, rho=rho), steps, step_size)
        except (ArithmeticError, ValueError, np.linalg.LinAlgError) as exc:
            row.update({c: math.nan for c in SWEEP_COLUMNS if c not in row}, failed=True)
            row["message"] = str(exc)
            return row
        row.update(
            initial_loss=traj.initial.loss, final_loss=traj.final.loss,
            initial_divergence=traj.initial.divergence, final_divergence=traj.final.divergence,
            initial_corner_error=traj.initial.corner_error, final_corner_error=traj.final.corner_error,
            failed=traj.failed,
        )
        return row

    workers = min(thread_count(), len(points))
    if workers <= 1:
        return [run(pt) for pt in points]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(run, points))


# -- CSV output --------------------------------------------------------------


def _fmt(x) -> str:
    if isinstance(x, bool):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def _write(rows, header) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def trajectory_csv(traj: DistillTrajectory, wallclock: bool = True) -> str:
    """``step,loss,divergence,corner_error,wallclock_ms``; one row per update.

    With ``wallclock=False`` the timing column is left empty, which keeps the
    file reproducible byte for byte.
    """
    rows = [
        [_fmt(r.step), _fmt(r.loss), _fmt(r.divergence), _fmt(r.corner_error), _fmt(r.wallclock_ms) if wallclock else ""]
        for r in traj.records
    ]
    return _write(rows, ["step", "loss", "divergence", "corner_error", "wallclock_ms"])


def scatter_csv(s: SyntheticScenario, traj: DistillTrajectory) -> str:
    """``role,corner,x,y,weight`` for the ground truth, teacher and the student before and after training."""
    rows = []
    for k, (x, y) in enumerate(s.corners):
        rows.append(["gt", k, _fmt(x), _fmt(y), _fmt(1.0)])
    teacher = generate_teacher(s)
    for role, votes, scores in (
        ("teacher", teacher.votes, teacher.scores),
        ("student_init", traj.initial_model.votes, traj.initial_model.scores),
        ("student_final", traj.final_model.votes, traj.final_model.scores),
    ):
        for i in range(len(votes)):
            for k in range(votes.shape[1]):
                rows.append([role, k, _fmt(votes[i, k, 0]), _fmt(votes[i, k, 1]), _fmt(scores[i])])
    return _write(rows, ["role", "corner", "x", "y", "weight"])


def sweep_csv(rows) -> str:
    return _write([[_fmt(r.get(c, "")) for c in SWEEP_COLUMNS] for r in rows], SWEEP_COLUMNS)
