"""JSON prediction files.

A file holds either sparse keypoint predictions or a dense code grid::

    {"kind": "keypoints", "image_size": [w, h], "num_keypoints": K,
     "cells": [{"cell_xy": [x, y], "score": s, "votes": [[u, v], ...]}, ...]}

    {"kind": "dense_codes", "grid_size": [wg, hg], "code_dim": D,
     "cells": [{"cell_xy": [x, y], "score": s, "code": [...]}, ...]}

Dense cells may appear in any order but must cover the grid exactly once.
Reals are written with 17 significant digits so that reading a file back
reproduces the arrays bit for bit.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

from .errors import InvalidInputError
from .predictions import DenseCodePredictionSet, KeypointPredictionSet

__all__ = ["SchemaError", "dumps_predictions", "loads_predictions", "write_predictions", "read_predictions"]

KINDS = ("keypoints", "dense_codes")


class SchemaError(InvalidInputError):
    """A prediction file does not follow the schema; the message names the field."""


def _real(x) -> str:
    x = float(x)
    if not math.isfinite(x):
        raise InvalidInputError(f"cannot serialize non-finite value {x}")
    text = format(x, ".17g")
    if text.lstrip("-").isdigit():
        text += ".0"
    return text


def _array(values) -> str:
    return "[" + ", ".join(_real(v) for v in values) + "]"


def dumps_predictions(pred) -> str:
    """Serialize a prediction set, one cell per line."""
    if isinstance(pred, KeypointPredictionSet):
        head = (
            f'{{"kind": "keypoints", "image_size": {_array(pred.image_size)}, '
            f'"num_keypoints": {pred.num_keypoints}, "cells": ['
        )
        cells = [
            f'{{"cell_xy": [{int(xy[0])}, {int(xy[1])}], "score": {_real(score)}, '
            f'"votes": [{", ".join(_array(v) for v in votes)}]}}'
            for xy, score, votes in zip(pred.cell_xy, pred.scores, pred.votes)
        ]
    elif isinstance(pred, DenseCodePredictionSet):
        wg, hg = pred.grid_size
        head = (
            f'{{"kind": "dense_codes", "grid_size": [{wg}, {hg}], "code_dim": {pred.code_dim}, '
            f'"coord_scale": {_real(pred.coord_scale)}, "cells": ['
        )
        cells = [
            f'{{"cell_xy": [{x}, {y}], "score": {_real(pred.scores[y, x])}, "code": {_array(pred.codes[y, x])}}}'
            for y in range(hg)
            for x in range(wg)
        ]
    else:
        raise InvalidInputError(f"cannot serialize {type(pred).__name__}")
    body = ",\n  ".join(cells)
    return head + ("\n  " + body + "\n" if cells else "") + "]}\n"


def _field(doc, key, where):
    if key not in doc:
        raise SchemaError(f"{where}: missing field {key!r}")
    return doc[key]


def _numbers(value, shape, where):
    try:
        arr = np.array(value, dtype=float)
    except (TypeError, ValueError):
        raise SchemaError(f"{where}: expected numbers") from None
    if arr.shape != shape:
        raise SchemaError(f"{where}: expected shape {shape}, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise SchemaError(f"{where}: non-finite value")
    return arr


def _integer(value, where):
    if isinstance(value, bool) or not isinstance(value, int):
        raise SchemaError(f"{where}: expected an integer")
    return value


def _parse_keypoints(doc):
    size = _numbers(_field(doc, "image_size", "document"), (2,), "image_size")
    k = _integer(_field(doc, "num_keypoints", "document"), "num_keypoints")
    cells = _field(doc, "cells", "document")
    if not isinstance(cells, list):
        raise SchemaError("cells: expected an array")
    xy, scores, votes = [], [], []
    for i, cell in enumerate(cells):
        where = f"cells[{i}]"
        if not isinstance(cell, dict):
            raise SchemaError(f"{where}: expected an object")
        pos = _field(cell, "cell_xy", where)
        if not isinstance(pos, list) or len(pos) != 2:
            raise SchemaError(f"{where}.cell_xy: expected two integers")
        xy.append([_integer(v, f"{where}.cell_xy") for v in pos])
        scores.append(_numbers(_field(cell, "score", where), (), f"{where}.score"))
        votes.append(_numbers(_field(cell, "votes", where), (k, 2), f"{where}.votes"))
    try:
        return KeypointPredictionSet(
            tuple(size), k, np.array(xy, dtype=np.int64).reshape(-1, 2),
            np.array(scores, dtype=float), np.array(votes, dtype=float).reshape(-1, k, 2),
        )
    except InvalidInputError as exc:
        raise SchemaError(str(exc)) from None


def _parse_dense(doc):
    size = _field(doc, "grid_size", "document")
    if not isinstance(size, list) or len(size) != 2:
        raise SchemaError("grid_size: expected two integers")
    wg, hg = (_integer(v, "grid_size") for v in size)
    if wg < 1 or hg < 1:
        raise SchemaError("grid_size: components must be >= 1")
    d = _integer(_field(doc, "code_dim", "document"), "code_dim")
    scale = float(_numbers(doc.get("coord_scale", 1.0), (), "coord_scale"))
    cells = _field(doc, "cells", "document")
    if not isinstance(cells, list):
        raise SchemaError("cells: expected an array")
    scores = np.full((hg, wg), np.nan)
    codes = np.zeros((hg, wg, d))
    for i, cell in enumerate(cells):
        where = f"cells[{i}]"
        if not isinstance(cell, dict):
            raise SchemaError(f"{where}: expected an object")
        pos = _field(cell, "cell_xy", where)
        if not isinstance(pos, list) or len(pos) != 2:
            raise SchemaError(f"{where}.cell_xy: expected two integers")
        x, y = (_integer(v, f"{where}.cell_xy") for v in pos)
        if not (0 <= x < wg and 0 <= y < hg):
            raise SchemaError(f"{where}.cell_xy: ({x}, {y}) outside the {wg}x{hg} grid")
        if not np.isnan(scores[y, x]):
            raise SchemaError(f"{where}.cell_xy: duplicate cell ({x}, {y})")
        scores[y, x] = _numbers(_field(cell, "score", where), (), f"{where}.score")
        codes[y, x] = _numbers(_field(cell, "code", where), (d,), f"{where}.code")
    if np.isnan(scores).any():
        y, x = np.argwhere(np.isnan(scores))[0]
        raise SchemaError(f"cells: grid cell ({x}, {y}) missing; dense grids must be fully populated")
    try:
        return DenseCodePredictionSet((wg, hg), d, scores, codes, scale)
    except InvalidInputError as exc:
        raise SchemaError(str(exc)) from None


def loads_predictions(text: str):
    """Parse a prediction file; raises :class:`SchemaError` with a line or field diagnostic."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    if not isinstance(doc, dict):
        raise SchemaError("document: expected a JSON object")
    kind = _field(doc, "kind", "document")
    if kind == "keypoints":
        return _parse_keypoints(doc)
    if kind == "dense_codes":
        return _parse_dense(doc)
    raise SchemaError(f"kind: expected one of {KINDS}, got {kind!r}")


def write_predictions(pred, path) -> None:
    Path(path).write_text(dumps_predictions(pred), encoding="utf-8")


def read_predictions(path):
    return loads_predictions(Path(path).read_text(encoding="utf-8"))
