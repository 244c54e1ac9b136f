import math

import numpy as np
import pytest
from scipy.special import logit

from otkd.errors import InvalidInputError
from otkd.harness import (
    DEFAULT_SWEEP_GRID,
    SWEEP_COLUMNS,
    StudentModel,
    SyntheticScenario,
    evaluate,
    generate_teacher,
    init_student,
    mean_corner_error,
    scatter_csv,
    sweep,
    sweep_csv,
    train_student,
    trajectory_csv,
)
from otkd.sinkhorn import KEYPOINT_CONFIG

BASE = SyntheticScenario()


def test_zero_noise_teacher_sits_on_the_corners():
    t = generate_teacher(BASE.replace(sigma_teacher=0.0, outlier_fraction=0.0))
    assert np.array_equal(t.votes, np.broadcast_to(BASE.corners, t.votes.shape))


def test_teacher_outliers_and_scores():
    t = generate_teacher(BASE)
    offsets = np.linalg.norm(t.votes - BASE.corners, axis=-1)
    outlier = (offsets > 10 * BASE.sigma_teacher).all(axis=1)
    assert outlier.sum() == 2
    assert np.all(t.scores[outlier] <= 0.3) and np.all(t.scores[~outlier] >= 0.7)
    assert len({tuple(c) for c in t.cell_xy}) == BASE.n_teacher


def test_generation_is_deterministic():
    a, b = generate_teacher(BASE.replace(seed=3)), generate_teacher(BASE.replace(seed=3))
    assert np.array_equal(a.votes, b.votes) and np.array_equal(a.scores, b.scores)
    assert not np.array_equal(a.votes, generate_teacher(BASE.replace(seed=4)).votes)
    m1, m2 = init_student(BASE), init_student(BASE)
    assert np.array_equal(m1.votes, m2.votes) and np.array_equal(m1.score_logits, m2.score_logits)


@pytest.mark.parametrize("overlap, shared", [(0.0, 0), (0.5, 8), (1.0, 15)])
def test_cell_overlap_counts(overlap, shared):
    s = BASE.replace(cell_overlap=overlap)
    t = {tuple(c) for c in generate_teacher(s).cell_xy}
    m = init_student(s)
    assert sum(tuple(c) in t for c in m.cell_xy) == shared
    assert len({tuple(c) for c in m.cell_xy}) == s.n_student


def test_scenario_validation():
    for bad in (dict(n_teacher=0), dict(outlier_fraction=1.0), dict(cell_overlap=1.5), dict(sigma_teacher=-1.0),
                dict(gt_corners=((0.0, 0.0, 0.0),))):
        with pytest.raises(InvalidInputError):
            SyntheticScenario(**bad)


def test_evaluate_examples():
    n, k = 4, BASE.num_keypoints
    votes = np.broadcast_to(BASE.corners, (n, k, 2)).copy()
    model = StudentModel(votes, np.zeros(n), np.arange(2 * n).reshape(n, 2))
    assert evaluate(model, BASE)[0] == 0.0
    shifted = StudentModel(votes + [0.1, 0.0], np.zeros(n), model.cell_xy)
    assert evaluate(shifted, BASE)[0] == pytest.approx(0.1, abs=1e-15)
    t = generate_teacher(BASE)
    clone = StudentModel(t.votes, logit(t.scores), t.cell_xy)
    assert abs(evaluate(clone, BASE)[1]) <= 8e-8
    with pytest.raises(InvalidInputError):
        evaluate(StudentModel(np.zeros((1, 3, 2)), np.zeros(1), np.zeros((1, 2), int)), BASE)


def test_mean_corner_error_weights():
    votes = np.array([[[0.0, 0.0]], [[1.0, 0.0]]])
    assert mean_corner_error(votes, [3.0, 1.0], np.array([[0.0, 0.0]])) == pytest.approx(0.25)


def test_teacher_initialized_student_stays_put():
    t = generate_teacher(BASE)
    clone = StudentModel(t.votes.copy(), logit(t.scores), t.cell_xy)
    traj = train_student(BASE, "ot-keypoint", steps=10, init=clone)
    assert abs(traj.initial.loss) <= 1e-6
    assert all(abs(r.loss) <= 1e-6 for r in traj.records)


def test_naive_without_shared_cells_never_moves():
    s = BASE.replace(cell_overlap=0.0)
    traj = train_student(s, "naive", steps=20)
    assert all(r.loss == 0.0 for r in traj.records)
    assert all(r.corner_error == traj.initial.corner_error for r in traj.records)
    assert np.array_equal(traj.final_model.votes, traj.initial_model.votes)


def test_naive_converges_when_cells_coincide():
    s = BASE.replace(cell_overlap=1.0, n_student=BASE.n_teacher)
    traj = train_student(s, "naive", steps=100)
    # a sum of distances is nonsmooth at zero, so convergence is sublinear
    assert traj.final.loss < 0.05 * traj.initial.loss
    assert traj.final.corner_error < 0.5 * traj.initial.corner_error


def test_trajectory_records_are_well_formed():
    traj = train_student(BASE, "ot-keypoint", steps=15)
    steps = [r.step for r in traj.records]
    assert steps == list(range(1, 16))
    losses = [traj.initial.loss] + [r.loss for r in traj.records]
    assert all(b <= a for a, b in zip(losses, losses[1:]))
    assert all(math.isfinite(v) for r in traj.records for v in (r.loss, r.divergence, r.corner_error))
    assert not traj.failed


def test_training_is_reproducible():
    a = train_student(BASE.replace(seed=5), "ot-keypoint", steps=8)
    b = train_student(BASE.replace(seed=5), "ot-keypoint", steps=8)
    assert trajectory_csv(a, wallclock=False) == trajectory_csv(b, wallclock=False)
    assert np.array_equal(a.final_model.votes, b.final_model.votes)


def test_train_student_errors():
    with pytest.raises(InvalidInputError):
        train_student(BASE, "ot-dense", steps=1)
    with pytest.raises(InvalidInputError):
        train_student(BASE, steps=0)


def test_csv_headers():
    traj = train_student(BASE, "naive", steps=2)
    lines = trajectory_csv(traj).splitlines()
    assert lines[0] == "step,loss,divergence,corner_error,wallclock_ms" and len(lines) == 3
    assert trajectory_csv(traj, wallclock=False).splitlines()[1].endswith(",")
    scatter = scatter_csv(BASE, traj).splitlines()
    assert scatter[0] == "role,corner,x,y,weight"
    roles = [line.split(",")[0] for line in scatter[1:]]
    k = BASE.num_keypoints
    assert roles.count("gt") == k and roles.count("teacher") == BASE.n_teacher * k
    assert roles.count("student_init") == roles.count("student_final") == BASE.n_student * k


def test_sweep_of_one_point_matches_direct_run():
    rows = sweep(BASE, {"loss_kind": ["ot-keypoint"], "epsilon": [1e-3], "rho": [0.5]}, steps=4)
    direct = train_student(BASE, "ot-keypoint", KEYPOINT_CONFIG, steps=4)
    assert len(rows) == 1
    assert rows[0]["final_loss"] == direct.final.loss
    assert rows[0]["final_corner_error"] == direct.final.corner_error


def test_sweep_counts_and_csv():
    rows = sweep(BASE, {"epsilon": [1e-3], "rho": [0.1, 0.5]}, steps=2)
    assert [(r["epsilon"], r["rho"]) for r in rows] == [(1e-3, 0.1), (1e-3, 0.5)]
    text = sweep_csv(rows).splitlines()
    assert text[0] == ",".join(SWEEP_COLUMNS) and len(text) == 3
    assert len(DEFAULT_SWEEP_GRID["epsilon"]) * len(DEFAULT_SWEEP_GRID["rho"]) * 2 == 12
    with pytest.raises(InvalidInputError):
        sweep(BASE, {"momentum": [0.5]})
    with pytest.raises(InvalidInputError):
        sweep(BASE, {"rho": []})


@pytest.fixture(scope="module")
def default_grid_rows():
    # epsilon changes the outcome very little; one value keeps the module quick
    naive = sweep(BASE, {"loss_kind": ["naive"], "epsilon": [1e-3], "rho": [0.5]}, steps=200)[0]
    ot = sweep(BASE, {"loss_kind": ["ot-keypoint"], "epsilon": [1e-3], "rho": [0.1, 0.5, 1.0]}, steps=200)
    return naive, {r["rho"]: r for r in ot}


@pytest.mark.parametrize("rho", [0.5, 1.0])
def test_transport_rows_beat_naive_on_corner_error(default_grid_rows, rho):
    naive, ot = default_grid_rows
    assert ot[rho]["final_corner_error"] < naive["final_corner_error"]


@pytest.mark.xfail(strict=True, reason="at rho=0.1 destroying far student mass is cheaper than moving it; "
                                       "the run converges to a corner error just above naive")
def test_transport_rows_beat_naive_on_corner_error_small_rho(default_grid_rows):
    naive, ot = default_grid_rows
    assert ot[0.1]["final_corner_error"] < naive["final_corner_error"]
