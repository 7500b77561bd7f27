"""Run-length-encoded masks, boxes, overlap geometry and class-agnostic NMS."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import kernels
from .errors import DimensionMismatch, MalformedRle, OutOfBounds, SchemaError


def _canonical_runs(runs: np.ndarray) -> np.ndarray:
    # merge away zero-length runs after the first one
    if runs.shape[0] <= 1 or np.all(runs[1:] > 0):
        return runs
    out = [int(runs[0])]
    parity = 0  # parity of the value of out[-1]
    for k in range(1, runs.shape[0]):
        r = int(runs[k])
        val = k % 2
        if r == 0:
            continue
        if val == parity:
            out[-1] += r
        else:
            out.append(r)
            parity = val
    return np.asarray(out, dtype=np.int64)


class BinaryMask:
    """Binary mask stored as COCO-style uncompressed RLE (column-major, zeros first)."""

    __slots__ = ("width", "height", "runs", "_area")

    def __init__(self, width: int, height: int, runs, validate: bool = True):
        self.width = int(width)
        self.height = int(height)
        runs = np.asarray(runs, dtype=np.int64).reshape(-1)
        if validate:
            if self.width <= 0 or self.height <= 0:
                raise MalformedRle(f"mask dimensions must be positive, got {width}x{height}")
            if runs.shape[0] == 0:
                raise MalformedRle("empty run list")
            if np.any(runs < 0):
                raise MalformedRle("negative run length")
            total = int(runs.sum())
            if total != self.width * self.height:
                raise MalformedRle(
                    f"runs sum to {total}, expected {self.width}*{self.height}={self.width * self.height}"
                )
            runs = _canonical_runs(runs)
        runs.setflags(write=False)
        self.runs = runs
        self._area = None

    @classmethod
    def from_dense(cls, grid) -> "BinaryMask":
        return rle_encode(grid)

    @classmethod
    def empty(cls, width: int, height: int) -> "BinaryMask":
        return cls(width, height, [width * height])

    @property
    def size(self):
        return (self.height, self.width)

    @property
    def area(self) -> int:
        if self._area is None:
            self._area = int(kernels.rle_area(self.runs))
        return self._area

    def to_dense(self) -> np.ndarray:
        return rle_decode(self)

    def to_json(self) -> dict:
        return {"size": [self.height, self.width], "counts": [int(r) for r in self.runs]}

    @classmethod
    def from_json(cls, obj) -> "BinaryMask":
        try:
            h, w = obj["size"]
            counts = obj["counts"]
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"bad RLE object: {obj!r}") from exc
        if isinstance(counts, str):
            raise SchemaError("compressed RLE strings are not supported; use integer counts")
        return cls(w, h, counts)

    def __eq__(self, other):
        if not isinstance(other, BinaryMask):
            return NotImplemented
        return (
            self.width == other.width
            and self.height == other.height
            and np.array_equal(self.runs, other.runs)
        )

    def __hash__(self):
        return hash((self.width, self.height, self.runs.tobytes()))

    def __repr__(self):
        return f"BinaryMask({self.width}x{self.height}, area={self.area}, n_runs={len(self.runs)})"


def rle_encode(grid) -> BinaryMask:
    """Encode a dense (height, width) binary grid."""
    grid = np.asarray(grid)
    if grid.ndim != 2 or grid.shape[0] <= 0 or grid.shape[1] <= 0:
        raise ValueError(f"expected a non-empty 2-D grid, got shape {grid.shape}")
    h, w = grid.shape
    flat = np.ascontiguousarray(grid.astype(np.uint8, copy=False).ravel(order="F"))
    runs = kernels.rle_encode_flat(flat)
    return BinaryMask(w, h, runs, validate=False)


def rle_decode(mask: BinaryMask) -> np.ndarray:
    """Dense uint8 grid of shape (height, width)."""
    n = mask.width * mask.height
    if int(mask.runs.sum()) != n:
        raise MalformedRle(f"runs sum to {int(mask.runs.sum())}, expected {n}")
    flat = kernels.rle_decode_flat(mask.runs, n)
    return flat.reshape((mask.height, mask.width), order="F")


def _check_same_dims(a: BinaryMask, b: BinaryMask):
    if a.width != b.width or a.height != b.height:
        raise DimensionMismatch(f"mask sizes differ: {a.width}x{a.height} vs {b.width}x{b.height}")


def mask_intersection(a: BinaryMask, b: BinaryMask) -> int:
    _check_same_dims(a, b)
    return int(kernels.rle_intersection(a.runs, b.runs))


def mask_iou(a: BinaryMask, b: BinaryMask) -> float:
    """Intersection over union; 0.0 when both masks are empty."""
    inter = mask_intersection(a, b)
    union = a.area + b.area - inter
    if union == 0:
        return 0.0
    return inter / union


def mask_iou_matrix(preds: Sequence[BinaryMask], gts: Sequence[BinaryMask]):
    """Pairwise IoU matrix plus the raw intersection and union counts."""
    dims = {(m.width, m.height) for m in preds} | {(m.width, m.height) for m in gts}
    if len(dims) > 1:
        raise DimensionMismatch(f"masks in one IoU matrix must share dimensions, got {sorted(dims)}")
    ra, oa = kernels.pack_runs([m.runs for m in preds])
    rb, ob = kernels.pack_runs([m.runs for m in gts])
    inter, union = kernels.rle_iou_matrix(ra, oa, rb, ob)
    inter = np.asarray(inter)
    union = np.asarray(union)
    iou = np.zeros(inter.shape, dtype=np.float64)
    nz = union > 0
    iou[nz] = inter[nz] / union[nz]
    return iou, inter, union


def mask_union(masks: Sequence[BinaryMask]) -> BinaryMask:
    if not masks:
        raise ValueError("need at least one mask")
    first = masks[0]
    acc = np.zeros((first.height, first.width), dtype=bool)
    for m in masks:
        _check_same_dims(first, m)
        acc |= rle_decode(m).astype(bool)
    return rle_encode(acc)


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box, half-open: ``x_max`` and ``y_max`` are exclusive."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError(f"degenerate box {self.as_list()}")
        if self.x_min < 0 or self.y_min < 0:
            raise ValueError(f"negative box coordinates {self.as_list()}")

    @property
    def area(self) -> float:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)

    def as_list(self):
        return [self.x_min, self.y_min, self.x_max, self.y_max]

    @classmethod
    def from_list(cls, xs) -> "BBox":
        if len(xs) != 4:
            raise SchemaError(f"bbox needs 4 coordinates, got {xs!r}")
        return cls(*(_num(v) for v in xs))


def _num(v):
    # keep ints as ints so JSON round-trips stay byte-stable
    if isinstance(v, bool):
        raise SchemaError("boolean is not a coordinate")
    if isinstance(v, int):
        return v
    return float(v)


def boxes_array(boxes: Sequence[BBox]) -> np.ndarray:
    if not boxes:
        return np.zeros((0, 4), dtype=np.float64)
    return np.asarray([b.as_list() for b in boxes], dtype=np.float64)


def box_iou(a: BBox, b: BBox) -> float:
    w = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    h = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if w <= 0 or h <= 0:
        return 0.0
    inter = w * h
    return inter / (a.area + b.area - inter)


def box_iou_matrix(a: Sequence[BBox], b: Sequence[BBox]) -> np.ndarray:
    return np.asarray(kernels.box_iou_matrix(boxes_array(a), boxes_array(b)))


@dataclass(frozen=True)
class ScoredDetection:
    bbox: BBox
    score: float
    model_id: str
    label: str
    mask: Optional[BinaryMask] = field(default=None, compare=False)

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")
        if not self.label:
            raise ValueError("detection label must be non-empty")


def greedy_nms_indices(dets: Sequence[ScoredDetection], tau_nms: float = 0.5) -> list:
    """Input indices kept by :func:`greedy_nms`, in keep order."""
    if not 0.0 < tau_nms <= 1.0:
        raise ValueError("tau_nms must lie in (0, 1]")
    if not dets:
        return []
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    boxes = boxes_array([dets[i].bbox for i in order])
    keep = kernels.nms_keep(boxes, float(tau_nms))
    return [order[k] for k in range(len(order)) if keep[k]]


def greedy_nms(dets: Sequence[ScoredDetection], tau_nms: float = 0.5) -> list:
    """Label-agnostic greedy NMS.

    Detections are visited by descending score (ties: lower input index
    first); one is kept iff its IoU with every kept box is below ``tau_nms``.
    """
    return [dets[i] for i in greedy_nms_indices(dets, tau_nms)]


def mask_from_box(box: BBox, width: int, height: int) -> BinaryMask:
    """Mask with exactly the pixels of ``box`` clipped to the image set."""
    x0 = max(0, math.ceil(box.x_min))
    y0 = max(0, math.ceil(box.y_min))
    x1 = min(width, math.ceil(box.x_max))
    y1 = min(height, math.ceil(box.y_max))
    if x0 >= x1 or y0 >= y1:
        raise OutOfBounds(f"box {box.as_list()} does not intersect a {width}x{height} image")
    h = height
    col = y1 - y0
    if col == h:
        runs = [x0 * h, (x1 - x0) * h, (width - x1) * h]
    else:
        runs = [x0 * h + y0]
        gap = h - col
        for c in range(x1 - x0):
            runs.append(col)
            if c < x1 - x0 - 1:
                runs.append(gap)
        runs.append((h - y1) + (width - x1) * h)
    return BinaryMask(width, height, runs)
