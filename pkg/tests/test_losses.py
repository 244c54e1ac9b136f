import math

import numpy as np
import pytest
from conftest import dense, keypoints
from hypothesis import given, settings
from hypothesis import strategies as st

from otkd.errors import EmptyDistributionError, InvalidInputError
from otkd.gradcheck import check_gradient, random_keypoint_pair
from otkd.losses import (
    PRESETS,
    binary_code_kd_loss,
    keypoint_kd_loss,
    loss_and_gradient,
    loss_gradient,
    naive_kd_loss,
    teacher_self_terms,
    thread_count,
)
from otkd.predictions import DenseCodePredictionSet
from otkd.sinkhorn import DENSE_CONFIG, KEYPOINT_CONFIG

BALANCED = KEYPOINT_CONFIG.replace(rho=math.inf)


def cluster_pair(rng, n_student=15, n_teacher=20, sigma_student=0.05, sigma_teacher=0.005, corners=None):
    corners = rng.random((8, 2)) if corners is None else corners
    s = keypoints(corners + rng.normal(0, sigma_student, (n_student, 8, 2)))
    t = keypoints(corners + rng.normal(0, sigma_teacher, (n_teacher, 8, 2)))
    return s, t


# -- naive -----------------------------------------------------------------------


def test_naive_examples():
    s = keypoints([[[0.1, 0.1]]])
    t = keypoints([[[0.4, 0.5]]])
    r = naive_kd_loss(s, t, p=2)
    assert r.total == pytest.approx(0.5, abs=1e-15) and r.matched_cells == 1
    assert naive_kd_loss(s, t, p=1).total == pytest.approx(0.7, abs=1e-15)
    assert naive_kd_loss(s, s).total == 0.0
    disjoint = keypoints([[[0.4, 0.5]]], cell_xy=[[3, 3]])
    r = naive_kd_loss(s, disjoint)
    assert r.total == 0.0 and r.matched_cells == 0


def test_naive_threshold_and_mismatch():
    s = keypoints([[[0.0, 0.0]], [[1.0, 0.0]]], scores=[0.9, 0.4])
    t = keypoints([[[0.0, 1.0]], [[1.0, 1.0]]], scores=[0.9, 0.9])
    r = naive_kd_loss(s, t)
    assert r.matched_cells == 1 and r.total == 1.0
    with pytest.raises(InvalidInputError):
        naive_kd_loss(s, keypoints(np.zeros((2, 2, 2))))


def test_naive_duplicate_active_cells():
    dup = keypoints([[[0.0, 0.0]], [[1.0, 0.0]]], scores=[0.9, 0.8], cell_xy=[[2, 2], [2, 2]])
    one = keypoints([[[0.0, 0.0]]], cell_xy=[[2, 2]])
    with pytest.raises(InvalidInputError, match="student: duplicate"):
        naive_kd_loss(dup, one)
    quiet = dup.replace(scores=np.array([0.9, 0.1]))
    assert naive_kd_loss(quiet, one).total == 0.0


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 10), st.integers(1, 8), st.integers(0, 2**32 - 1))
def test_naive_self_is_exactly_zero(n, k, seed):
    rng = np.random.default_rng(seed)
    cells = rng.choice(100, n, replace=False)
    s = keypoints(rng.normal(size=(n, k, 2)), rng.random(n), np.stack([cells % 10, cells // 10], 1))
    assert naive_kd_loss(s, s).total == 0.0


def test_naive_gradient_ignores_unmatched_cells():
    s = keypoints([[[0.0, 0.0]], [[1.0, 0.0]]], cell_xy=[[0, 0], [5, 5]])
    t = keypoints([[[0.0, 1.0]]], cell_xy=[[0, 0]])
    g = loss_gradient("naive", s, t)
    assert g.d_points[0, 0].tolist() == [0.0, -1.0]
    assert g.d_points[1].tolist() == [[0.0, 0.0]]
    assert np.all(g.d_weights == 0)


# -- keypoint transport loss -------------------------------------------------------


def test_keypoint_identity_and_singleton(rng):
    s, _ = cluster_pair(rng)
    r = keypoint_kd_loss(s, s)
    assert abs(r.total) <= 8e-8 and len(r.per_corner) == 8
    a, b = keypoints([[[0.1, 0.2]]]), keypoints([[[0.1, 0.5]]])
    assert keypoint_kd_loss(a, b, BALANCED).total == pytest.approx(0.3, abs=1e-12)
    # finite rho: one plan entry of mass exp(-d / k), value k (1 - mass), k = eps^2 + 2 rho^2
    k = 1e-6 + 2 * 0.25
    assert keypoint_kd_loss(a, b).total == pytest.approx(k * -math.expm1(-0.3 / k), rel=1e-12)


def test_keypoint_total_is_sum_of_corners(rng):
    s, t = cluster_pair(rng, 6, 9)
    r = keypoint_kd_loss(s, t)
    assert r.total == pytest.approx(sum(r.per_corner), rel=1e-9)
    assert r.converged and len(r.summaries) == 24


def test_keypoint_loss_shrinks_with_student_spread():
    rng = np.random.default_rng(2024)
    corners = rng.random((8, 2))
    t = keypoints(corners + rng.normal(0, 0.005, (20, 8, 2)))
    noise = rng.normal(size=(15, 8, 2))
    values = [keypoint_kd_loss(keypoints(corners + sigma * noise), t).total for sigma in np.linspace(0.05, 0.005, 5)]
    assert values[-1] > 0
    assert all(x > y for x, y in zip(values, values[1:]))


def test_corner_permutation_equivariance(rng):
    s, t = cluster_pair(rng, 7, 5)
    perm = rng.permutation(8)
    r0 = keypoint_kd_loss(s, t)
    r1 = keypoint_kd_loss(s.replace(votes=s.votes[:, perm]), t.replace(votes=t.votes[:, perm]))
    assert r1.per_corner == tuple(np.array(r0.per_corner)[perm])
    assert r1.total == r0.total


@settings(max_examples=10, deadline=None)
@given(st.integers(1, 9), st.integers(1, 9), st.integers(0, 2**32 - 1))
def test_any_cell_counts_give_finite_loss(n, m, seed):
    s, t = cluster_pair(np.random.default_rng(seed), n, m)
    r = keypoint_kd_loss(s, t)
    assert math.isfinite(r.total) and r.total >= -1e-9


def test_rejects_unnormalized_votes():
    pixels = keypoints([[[320.0, 240.0]]], image_size=(640, 480))
    unit = keypoints([[[0.5, 0.5]]])
    with pytest.raises(InvalidInputError, match="normalized"):
        keypoint_kd_loss(pixels, unit)
    assert math.isfinite(keypoint_kd_loss(pixels, unit, magnitude_bound=None).total)


def test_empty_side_is_named():
    zero = keypoints([[[0.5, 0.5]]], scores=[0.0])
    one = keypoints([[[0.5, 0.5]]])
    with pytest.raises(EmptyDistributionError) as info:
        keypoint_kd_loss(zero, one)
    assert info.value.side == "student"
    with pytest.raises(EmptyDistributionError) as info:
        keypoint_kd_loss(one, zero)
    assert info.value.side == "teacher"


def test_raw_mode_and_mass_flag(rng):
    s, t = cluster_pair(rng, 4, 4)
    s = s.replace(scores=np.full(4, 0.5))
    r = keypoint_kd_loss(s, t, mode="raw")
    assert r.mass_mismatch and math.isfinite(r.total)
    assert not keypoint_kd_loss(s, t).mass_mismatch


def test_outlier_weight_does_not_lower_the_loss(rng):
    corners = rng.random((8, 2))
    t = keypoints(corners + rng.normal(0, 0.005, (10, 8, 2)))
    votes = corners + rng.normal(0, 0.005, (6, 8, 2))
    votes[-1] = corners + 0.2  # far beyond ten cluster spreads
    values = []
    for w in (0.1, 0.4, 0.7, 1.0):
        scores = np.full(6, 0.8)
        scores[-1] = w
        values.append(keypoint_kd_loss(keypoints(votes, scores), t).total)
    assert all(x <= y for x, y in zip(values, values[1:]))


def test_teacher_self_terms_reuse(rng):
    s, t = cluster_pair(rng, 5, 6)
    b = t.scores / t.scores.sum()
    cached = teacher_self_terms(np.swapaxes(t.votes, 0, 1), b, KEYPOINT_CONFIG)
    assert keypoint_kd_loss(s, t, teacher_self=cached).total == keypoint_kd_loss(s, t).total


def test_threads_do_not_change_results(rng, monkeypatch):
    s, t = cluster_pair(rng, 6, 7)
    serial = loss_and_gradient("ot-keypoint", s, t)
    monkeypatch.setenv("OTKD_THREADS", "3")
    assert thread_count() == 3
    threaded = loss_and_gradient("ot-keypoint", s, t)
    assert threaded[0].total == serial[0].total
    assert np.array_equal(threaded[1].d_points, serial[1].d_points)
    monkeypatch.setenv("OTKD_THREADS", "0")
    assert thread_count() >= 1
    monkeypatch.setenv("OTKD_THREADS", "x")
    with pytest.raises(InvalidInputError):
        thread_count()


def test_presets():
    assert (PRESETS["linemod-kp"].epsilon, PRESETS["linemod-kp"].rho, PRESETS["linemod-kp"].weight) == (1e-3, 0.5, 5.0)
    assert (PRESETS["occ-kp"].epsilon, PRESETS["occ-kp"].rho, PRESETS["occ-kp"].weight) == (1e-3, 0.5, 0.1)
    assert (PRESETS["zebrapose"].epsilon, PRESETS["zebrapose"].rho, PRESETS["zebrapose"].weight) == (1e-4, 0.1, 100.0)
    assert PRESETS["zebrapose"].config() == DENSE_CONFIG
    assert PRESETS["linemod-kp"].config() == KEYPOINT_CONFIG


# -- gradients -------------------------------------------------------------------


def test_gradient_vanishes_at_identity(rng):
    s, _ = cluster_pair(rng, 6, 6)
    g = loss_gradient("ot-keypoint", s, s)
    assert np.abs(g.d_points).max() <= 1e-6


def test_singleton_gradient_direction():
    s, t = keypoints([[[0.0, 0.0]]]), keypoints([[[1.0, 0.0]]])
    g = loss_gradient("ot-keypoint", s, t, BALANCED)
    assert g.d_points[0, 0] == pytest.approx([-1.0, 0.0], abs=1e-12)
    g = loss_gradient("ot-keypoint", s, t)
    mass = math.exp(-1.0 / (1e-6 + 0.5))
    assert g.d_points[0, 0] == pytest.approx([-mass, 0.0], rel=1e-9, abs=1e-15)


def test_dropped_cells_get_zero_gradient(rng):
    s, t = cluster_pair(rng, 5, 5)
    s = s.replace(scores=np.array([0.9, 0.0, 0.8, 0.7, 0.6]))
    for mode in ("unit-mass", "raw"):
        g = loss_gradient("ot-keypoint", s, t, mode=mode)
        assert np.all(g.d_points[1] == 0) and g.d_weights[1] == 0
        assert np.all(np.isfinite(g.d_points)) and np.all(np.isfinite(g.d_weights))


def test_random_five_cell_instance_matches_finite_differences():
    rng = np.random.default_rng(5)
    s, t = random_keypoint_pair(rng, max_cells=5)
    res = check_gradient("ot-keypoint", s, t)
    assert res.passed, res


def test_one_gradient_step_decreases_the_loss(rng):
    s, t = cluster_pair(rng, 8, 10)
    report, grad = loss_and_gradient("ot-keypoint", s, t)
    assert report.total > 0
    step = 1.0
    while step > 1e-12:
        trial = s.replace(votes=s.votes - step * grad.d_points)
        if keypoint_kd_loss(trial, t).total < report.total:
            break
        step /= 2
    assert step > 1e-12


# -- dense codes -----------------------------------------------------------------


def test_dense_identity_and_singleton(rng):
    d = dense(rng.random((16, 16, 16)), rng.uniform(0.5, 1, (16, 16)))
    assert abs(binary_code_kd_loss(d, d).total) <= 1e-8
    codes = np.full((8, 8, 16), 0.25)
    moved = codes.copy()
    moved[..., 3] += 0.5
    value = binary_code_kd_loss(dense(moved), dense(codes), DENSE_CONFIG.replace(rho=math.inf))
    assert value.total == pytest.approx(0.5, abs=1e-12)


def test_dense_loss_grows_with_noise():
    rng = np.random.default_rng(99)
    crisp = np.where(rng.random((16, 16, 16)) < 0.5, 0.05, 0.95)
    teacher = dense(crisp)
    noise = rng.uniform(-1, 1, crisp.shape)
    values = [binary_code_kd_loss(dense(np.clip(crisp + a * noise, 0, 1)), teacher).total for a in (0.1, 0.2, 0.3)]
    assert values[0] < values[1] < values[2]


def test_dense_mismatch_errors():
    a = dense(np.zeros((8, 8, 4)))
    with pytest.raises(InvalidInputError):
        binary_code_kd_loss(a, dense(np.zeros((8, 16, 4))))
    with pytest.raises(InvalidInputError):
        binary_code_kd_loss(a, dense(np.zeros((8, 8, 3))))


def test_dense_gradient_shapes(rng):
    d = DenseCodePredictionSet((16, 16), 16, rng.uniform(0.5, 1, (16, 16)), rng.random((16, 16, 16)))
    e = d.replace(codes=np.clip(d.codes + 0.1, 0, 1))
    g = loss_gradient("ot-dense", d, e)
    assert g.d_points.shape == (4, 18) and g.d_weights.shape == (4,)
    with pytest.raises(InvalidInputError):
        loss_gradient("bogus", d, e)
