"""Teacher/student local predictions and the transforms that turn them into
weighted point clouds.

Keypoint predictions hold, for every active cell, a segmentation score and one
2-D vote per keypoint. Dense predictions hold a score and a vector of bit
probabilities for every cell of a regular grid. Both reduce to
:class:`WeightedPointSet`, the only input the transport solvers understand.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyDistributionError, InvalidInputError

__all__ = [
    "WeightedPointSet",
    "KeypointPredictionSet",
    "DenseCodePredictionSet",
    "normalize_keypoints",
    "extract_corner_cloud",
    "pool_dense",
    "normalize_weights",
    "WEIGHT_FLOOR",
]

WEIGHT_FLOOR = 1e-6


def _frozen(arr, dtype=float):
    out = np.array(arr, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class WeightedPointSet:
    """N points in D dimensions carrying nonnegative masses.

    Parameters
    ----------
    points : array-like, shape (N, D)
    weights : array-like, shape (N,)
    """

    points: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        pts = _frozen(self.points)
        w = _frozen(self.weights)
        if pts.ndim == 1:
            pts = _frozen(pts[:, None])
        if pts.ndim != 2 or pts.shape[0] < 1:
            raise InvalidInputError(f"points must be a nonempty (N, D) array, got shape {pts.shape}")
        if w.shape != (pts.shape[0],):
            raise InvalidInputError(f"weights shape {w.shape} does not match {pts.shape[0]} points")
        if not np.all(np.isfinite(pts)):
            raise InvalidInputError("points contain non-finite values")
        if not np.all(np.isfinite(w)) or np.any(w < 0):
            raise InvalidInputError("weights must be finite and nonnegative")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", w)

    def __len__(self):
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @property
    def mass(self) -> float:
        return float(self.weights.sum())

    def normalized(self, mode: str = "unit-mass", floor: float = WEIGHT_FLOOR) -> "WeightedPointSet":
        """Copy with weights passed through :func:`normalize_weights` (dropped points removed)."""
        w, keep = normalize_weights(self.weights, mode=mode, floor=floor)
        return WeightedPointSet(self.points[keep], w)


def normalize_weights(weights, mode: str = "unit-mass", floor: float = WEIGHT_FLOOR):
    """Prepare marginal masses for a transport solve.

    In ``"unit-mass"`` mode the weights are rescaled to sum to one, entries that
    end up below ``floor`` are dropped and the survivors rescaled again. In
    ``"raw"`` mode the weights are returned unchanged.

    Returns
    -------
    weights : ndarray
        The kept weights.
    keep : ndarray of bool
        Mask over the input marking the kept entries.

    Raises
    ------
    EmptyDistributionError
        If no weight survives.
    """
    w = np.asarray(weights, dtype=float)
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise InvalidInputError("weights must be finite and nonnegative")
    if mode == "raw":
        return w.copy(), np.ones(w.shape, dtype=bool)
    if mode != "unit-mass":
        raise InvalidInputError(f"unknown normalization mode {mode!r}")
    total = w.sum()
    if total <= 0:
        raise EmptyDistributionError("all weights are zero")
    keep = w / total >= floor
    if not np.any(keep):
        raise EmptyDistributionError(f"no weight above floor {floor}")
    kept = w[keep]
    return kept / kept.sum(), keep


@dataclass(frozen=True, eq=False)
class KeypointPredictionSet:
    """Sparse keypoint votes from the active cells of a network output.

    ``votes[i, k]`` is the 2-D location cell ``i`` predicts for keypoint ``k``,
    in pixels until :func:`normalize_keypoints` maps it to image-relative units.
    """

    image_size: tuple
    num_keypoints: int
    cell_xy: np.ndarray
    scores: np.ndarray
    votes: np.ndarray

    def __post_init__(self):
        size = tuple(float(s) for s in self.image_size)
        if len(size) != 2:
            raise InvalidInputError("image_size must be (width, height)")
        k = int(self.num_keypoints)
        if k < 1:
            raise InvalidInputError("num_keypoints must be >= 1")
        xy = _frozen(self.cell_xy, dtype=np.int64).reshape(-1, 2)
        scores = _frozen(self.scores).reshape(-1)
        votes = _frozen(self.votes)
        n = xy.shape[0]
        if votes.shape != (n, k, 2):
            raise InvalidInputError(f"votes must have shape ({n}, {k}, 2), got {votes.shape}")
        if scores.shape != (n,):
            raise InvalidInputError(f"expected {n} scores, got {scores.shape[0]}")
        if np.any(scores < 0) or np.any(scores > 1) or not np.all(np.isfinite(scores)):
            raise InvalidInputError("scores must lie in [0, 1]")
        if not np.all(np.isfinite(votes)):
            raise InvalidInputError("votes contain non-finite values")
        object.__setattr__(self, "image_size", size)
        object.__setattr__(self, "num_keypoints", k)
        object.__setattr__(self, "cell_xy", xy)
        object.__setattr__(self, "scores", scores)
        object.__setattr__(self, "votes", votes)

    def __len__(self):
        return self.cell_xy.shape[0]

    def replace(self, **changes) -> "KeypointPredictionSet":
        fields = dict(
            image_size=self.image_size,
            num_keypoints=self.num_keypoints,
            cell_xy=self.cell_xy,
            scores=self.scores,
            votes=self.votes,
        )
        fields.update(changes)
        return KeypointPredictionSet(**fields)


@dataclass(frozen=True, eq=False)
class DenseCodePredictionSet:
    """Per-cell segmentation score and bit-probability vector on a full grid.

    Arrays are indexed ``[row, col]``, i.e. ``scores`` has shape ``(H_g, W_g)``
    and ``codes`` shape ``(H_g, W_g, code_dim)``, while ``grid_size`` is
    ``(W_g, H_g)``.
    """

    grid_size: tuple
    code_dim: int
    scores: np.ndarray
    codes: np.ndarray
    coord_scale: float = field(default=1.0)

    def __post_init__(self):
        wg, hg = (int(s) for s in self.grid_size)
        if wg < 1 or hg < 1:
            raise InvalidInputError("grid_size components must be >= 1")
        d = int(self.code_dim)
        scores = _frozen(self.scores)
        codes = _frozen(self.codes)
        if scores.shape != (hg, wg):
            raise InvalidInputError(f"scores must have shape ({hg}, {wg}), got {scores.shape}")
        if codes.shape != (hg, wg, d):
            raise InvalidInputError(f"codes must have shape ({hg}, {wg}, {d}), got {codes.shape}")
        for name, arr in (("scores", scores), ("codes", codes)):
            if not np.all(np.isfinite(arr)) or np.any(arr < 0) or np.any(arr > 1):
                raise InvalidInputError(f"{name} must lie in [0, 1]")
        object.__setattr__(self, "grid_size", (wg, hg))
        object.__setattr__(self, "code_dim", d)
        object.__setattr__(self, "scores", scores)
        object.__setattr__(self, "codes", codes)

    def replace(self, **changes) -> "DenseCodePredictionSet":
        fields = dict(
            grid_size=self.grid_size,
            code_dim=self.code_dim,
            scores=self.scores,
            codes=self.codes,
            coord_scale=self.coord_scale,
        )
        fields.update(changes)
        return DenseCodePredictionSet(**fields)


def normalize_keypoints(kps: KeypointPredictionSet) -> KeypointPredictionSet:
    """Divide every vote by the image size. Out-of-frame votes are kept as they are."""
    width, height = kps.image_size
    if width <= 0 or height <= 0:
        raise InvalidInputError(f"image_size must be positive, got {kps.image_size}")
    return kps.replace(votes=kps.votes / np.array([width, height]))


def extract_corner_cloud(kps: KeypointPredictionSet, k: int) -> WeightedPointSet:
    """Votes for keypoint ``k`` as a point cloud weighted by the raw cell scores."""
    if not 0 <= k < kps.num_keypoints:
        raise InvalidInputError(f"keypoint index {k} out of range [0, {kps.num_keypoints})")
    if len(kps) == 0:
        raise EmptyDistributionError("prediction set has no cells")
    return WeightedPointSet(kps.votes[:, k, :], kps.scores)


def pool_dense(dense: DenseCodePredictionSet, block: int = 8) -> WeightedPointSet:
    """Average-pool codes and scores over ``block`` x ``block`` tiles.

    Each tile becomes one point: its mean code followed by the tile-centre
    (x, y) coordinates divided by the grid size (times ``dense.coord_scale``).
    Its weight is the mean score. Trailing rows/columns that do not fill a
    whole tile are ignored. Tiles are emitted in row-major order.
    """
    block = int(block)
    wg, hg = dense.grid_size
    if block < 1:
        raise InvalidInputError("block must be >= 1")
    if block > wg or block > hg:
        raise InvalidInputError(f"block {block} exceeds grid size {dense.grid_size}")
    ty, tx = hg // block, wg // block
    codes = dense.codes[: ty * block, : tx * block]
    scores = dense.scores[: ty * block, : tx * block]
    pooled_codes = codes.reshape(ty, block, tx, block, -1).mean(axis=(1, 3))
    pooled_scores = scores.reshape(ty, block, tx, block).mean(axis=(1, 3))
    cy, cx = np.meshgrid((np.arange(ty) + 0.5) * block / hg, (np.arange(tx) + 0.5) * block / wg, indexing="ij")
    coords = np.stack([cx, cy], axis=-1) * dense.coord_scale
    points = np.concatenate([pooled_codes, coords], axis=-1).reshape(ty * tx, -1)
    return WeightedPointSet(points, pooled_scores.reshape(-1))
