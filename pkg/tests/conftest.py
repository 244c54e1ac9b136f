import sys

import numpy as np
import pytest

from otkd.predictions import DenseCodePredictionSet, KeypointPredictionSet


def keypoints(votes, scores=None, cell_xy=None, image_size=(1.0, 1.0)):
    """Keypoint set from a (N, K, 2) vote array; scores default to 1, cells to a row."""
    votes = np.asarray(votes, dtype=float)
    n, k, _ = votes.shape
    if scores is None:
        scores = np.ones(n)
    if cell_xy is None:
        cell_xy = np.stack([np.arange(n), np.zeros(n, dtype=int)], axis=1)
    return KeypointPredictionSet(image_size, k, cell_xy, scores, votes)


def dense(codes, scores=None):
    codes = np.asarray(codes, dtype=float)
    hg, wg, d = codes.shape
    if scores is None:
        scores = np.ones((hg, wg))
    return DenseCodePredictionSet((wg, hg), d, scores, codes)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
