import numpy as np
import pytest
from conftest import dense, keypoints
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from otkd.errors import EmptyDistributionError, InvalidInputError
from otkd.predictions import (
    WeightedPointSet,
    extract_corner_cloud,
    normalize_keypoints,
    normalize_weights,
    pool_dense,
)


def test_weighted_point_set_validation():
    with pytest.raises(InvalidInputError):
        WeightedPointSet(np.zeros((0, 2)), np.zeros(0))
    with pytest.raises(InvalidInputError):
        WeightedPointSet([[0.0, 0.0]], [-1.0])
    with pytest.raises(InvalidInputError):
        WeightedPointSet([[np.nan, 0.0]], [1.0])
    with pytest.raises(InvalidInputError):
        WeightedPointSet([[0.0, 0.0]], [1.0, 2.0])
    s = WeightedPointSet([[0.0, 1.0], [2.0, 3.0]], [1.0, 3.0])
    assert len(s) == 2 and s.dim == 2 and s.mass == 4.0


def test_normalize_keypoints_examples():
    kps = keypoints([[[320, 240], [0, 0], [704, 480]]], image_size=(640, 480))
    out = normalize_keypoints(kps)
    assert out.votes[0].tolist() == [[0.5, 0.5], [0.0, 0.0], [1.1, 1.0]]
    assert out.scores.tolist() == kps.scores.tolist()
    assert out.cell_xy.tolist() == kps.cell_xy.tolist()


def test_normalize_keypoints_rejects_nonpositive_size():
    kps = keypoints([[[1, 1]]], image_size=(0, 480))
    with pytest.raises(InvalidInputError):
        normalize_keypoints(kps)


def test_normalize_keypoints_divides_each_time():
    kps = keypoints([[[4.0, 8.0]]], image_size=(2, 4))
    twice = normalize_keypoints(normalize_keypoints(kps))
    assert twice.votes[0, 0].tolist() == [1.0, 0.5]


def test_keypoint_scores_must_be_probabilities():
    with pytest.raises(InvalidInputError):
        keypoints([[[0, 0]]], scores=[1.5])
    with pytest.raises(InvalidInputError):
        keypoints(np.zeros((2, 3, 2)), scores=[0.5])


def test_extract_corner_cloud():
    votes = np.arange(3 * 8 * 2, dtype=float).reshape(3, 8, 2)
    kps = keypoints(votes, scores=[0.2, 0.5, 0.9])
    cloud = extract_corner_cloud(kps, 0)
    assert cloud.points.tolist() == votes[:, 0].tolist()
    assert cloud.weights.tolist() == [0.2, 0.5, 0.9]
    assert extract_corner_cloud(keypoints(votes, scores=[0.5] * 3), 7).weights.tolist() == [0.5] * 3
    with pytest.raises(InvalidInputError):
        extract_corner_cloud(kps, 8)


@settings(max_examples=50, deadline=None)
@given(arrays(float, st.tuples(st.integers(1, 6), st.integers(1, 8), st.just(2)), elements=st.floats(-5, 5)))
def test_corner_clouds_partition_the_votes(votes):
    kps = keypoints(votes)
    rebuilt = np.stack([extract_corner_cloud(kps, k).points for k in range(kps.num_keypoints)], axis=1)
    assert np.array_equal(rebuilt, votes)


def test_pool_dense_counts_and_constants():
    d = dense(np.full((16, 16, 16), 0.3), scores=np.full((16, 16), 0.7))
    pooled = pool_dense(d, 8)
    assert len(pooled) == 4 and pooled.dim == 18
    assert np.allclose(pooled.points[:, :16], 0.3)
    assert np.allclose(pooled.weights, 0.7)
    assert pooled.points[:, 16:].tolist() == [[0.25, 0.25], [0.75, 0.25], [0.25, 0.75], [0.75, 0.75]]


def test_pool_dense_quarter_mass_tile():
    scores = np.zeros((8, 8))
    scores[:4, :4] = 1.0
    assert pool_dense(dense(np.zeros((8, 8, 2)), scores), 8).weights.tolist() == [0.25]


def test_pool_dense_truncates_partial_tiles_and_rejects_large_blocks():
    d = dense(np.zeros((10, 13, 1)))
    assert len(pool_dense(d, 4)) == 2 * 3
    with pytest.raises(InvalidInputError):
        pool_dense(d, 11)
    with pytest.raises(InvalidInputError):
        pool_dense(d, 0)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 4), st.integers(1, 3), st.integers(1, 3), st.integers(0, 2**32 - 1))
def test_pool_dense_preserves_mass(block, tx, ty, seed):
    rng = np.random.default_rng(seed)
    scores = rng.random((ty * block, tx * block))
    d = dense(rng.random((ty * block, tx * block, 3)), scores)
    pooled = pool_dense(d, block)
    assert len(pooled) == tx * ty
    assert np.isclose(pooled.weights.sum() * block**2, scores.sum(), rtol=1e-12)


def test_normalize_weights_examples():
    w, keep = normalize_weights([2.0, 2.0])
    assert w.tolist() == [0.5, 0.5] and keep.all()
    w, keep = normalize_weights([1.0, 0.0, 1.0], floor=1e-6)
    assert w.tolist() == [0.5, 0.5] and keep.tolist() == [True, False, True]
    with pytest.raises(EmptyDistributionError):
        normalize_weights([0.0, 0.0])
    raw, keep = normalize_weights([3.0, 0.0], mode="raw")
    assert raw.tolist() == [3.0, 0.0] and keep.all()
    with pytest.raises(InvalidInputError):
        normalize_weights([1.0], mode="bogus")


@settings(max_examples=100, deadline=None)
@given(arrays(float, st.integers(1, 30), elements=st.floats(0, 1e3)))
def test_unit_mass_sums_to_one(w):
    if w.sum() <= 0:
        with pytest.raises(EmptyDistributionError):
            normalize_weights(w)
        return
    out, keep = normalize_weights(w)
    assert abs(out.sum() - 1.0) <= 1e-12
    assert np.all(out >= 1e-6 * 0.999)
    assert keep.sum() == len(out)
