"""Axis-aligned boxes, IoU / GIoU and the query distance ``1 - GIoU``.

Boxes are stored in corner form ``(x_min, y_min, x_max, y_max)``. The
``(x, y, w, h)`` view uses the top-left corner as ``(x, y)``.

Scalar functions take :class:`BBox` values; the ``pairwise_*`` functions take
``(N, 4)`` corner arrays and return ``(N, M)`` matrices.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Iterable, Sequence

import numpy as np


@dataclass(frozen=True)
class BBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        coords = (self.x_min, self.y_min, self.x_max, self.y_max)
        if not all(np.isfinite(c) for c in coords):
            raise ValueError(f"non-finite box coordinates: {coords}")
        if self.x_max < self.x_min or self.y_max < self.y_min:
            raise ValueError(f"negative box extent: {coords}")

    @classmethod
    def from_xywh(cls, x: float, y: float, w: float, h: float) -> "BBox":
        return cls(x, y, x + w, y + h)

    @classmethod
    def from_cxcywh(cls, cx: float, cy: float, w: float, h: float) -> "BBox":
        return cls(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)

    @classmethod
    def from_array(cls, a: Sequence[float]) -> "BBox":
        return cls(float(a[0]), float(a[1]), float(a[2]), float(a[3]))

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def is_degenerate(self) -> bool:
        return self.area <= 0.0

    def to_xywh(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.width, self.height)

    def to_cxcywh(self) -> tuple[float, float, float, float]:
        return (
            0.5 * (self.x_min + self.x_max),
            0.5 * (self.y_min + self.y_max),
            self.width,
            self.height,
        )

    def as_array(self) -> np.ndarray:
        return np.array([self.x_min, self.y_min, self.x_max, self.y_max], dtype=np.float64)

    def contains_point(self, x: float, y: float, strict: bool = False) -> bool:
        if strict:
            return self.x_min < x < self.x_max and self.y_min < y < self.y_max
        return self.x_min <= x <= self.x_max and self.y_min <= y <= self.y_max


@dataclass(frozen=True)
class Annotation:
    """One pedestrian: full-body box, visible-region box, tag and ignore flag.

    ``raw`` keeps the source record (if any) so that files can be written back
    byte-for-byte; it is never consulted for geometry.
    """

    fbox: BBox
    vbox: BBox
    tag: str = "person"
    ignore: bool = False
    raw: dict[str, Any] | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if not self.ignore and self.vbox.area <= 0.0:
            raise ValueError("non-ignore annotation needs a visible box with positive area")


def as_box_array(boxes: Iterable[BBox] | np.ndarray | Sequence[Sequence[float]]) -> np.ndarray:
    """Coerce a sequence of BBox (or an array-like of corners) to an ``(N, 4)`` float array."""
    if isinstance(boxes, np.ndarray):
        arr = np.asarray(boxes, dtype=np.float64)
    else:
        items = list(boxes)
        if items and isinstance(items[0], BBox):
            arr = np.array([b.as_array() for b in items], dtype=np.float64)
        else:
            arr = np.asarray(items, dtype=np.float64)
    if arr.size == 0:
        return arr.reshape(0, 4)
    if arr.ndim != 2 or arr.shape[1] != 4:
        raise ValueError(f"expected (N, 4) boxes, got shape {arr.shape}")
    return arr


def xywh_to_xyxy(boxes: np.ndarray) -> np.ndarray:
    b = np.asarray(boxes, dtype=np.float64)
    return np.concatenate([b[..., :2], b[..., :2] + b[..., 2:]], axis=-1)


def xyxy_to_xywh(boxes: np.ndarray) -> np.ndarray:
    b = np.asarray(boxes, dtype=np.float64)
    return np.concatenate([b[..., :2], b[..., 2:] - b[..., :2]], axis=-1)


def cxcywh_to_xyxy(boxes: np.ndarray) -> np.ndarray:
    b = np.asarray(boxes, dtype=np.float64)
    half = 0.5 * b[..., 2:]
    return np.concatenate([b[..., :2] - half, b[..., :2] + half], axis=-1)


def xyxy_to_cxcywh(boxes: np.ndarray) -> np.ndarray:
    b = np.asarray(boxes, dtype=np.float64)
    return np.concatenate([0.5 * (b[..., :2] + b[..., 2:]), b[..., 2:] - b[..., :2]], axis=-1)


def box_area(boxes: np.ndarray) -> np.ndarray:
    b = np.asarray(boxes, dtype=np.float64)
    return (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1])


def _inter_union_hull(a: np.ndarray, b: np.ndarray):
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    area_a = box_area(a)
    area_b = box_area(b)
    union = area_a[:, None] + area_b[None, :] - inter
    hlt = np.minimum(a[:, None, :2], b[None, :, :2])
    hrb = np.maximum(a[:, None, 2:], b[None, :, 2:])
    hwh = hrb - hlt
    hull = hwh[..., 0] * hwh[..., 1]
    return inter, union, hull, area_a, area_b


def pairwise_iou(a, b) -> np.ndarray:
    """IoU matrix; any pair involving a zero-area box scores 0."""
    a = as_box_array(a)
    b = as_box_array(b)
    inter, union, _, area_a, area_b = _inter_union_hull(a, b)
    degenerate = (area_a[:, None] <= 0.0) | (area_b[None, :] <= 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(degenerate | (union <= 0.0), 0.0, inter / union)
    return out


def pairwise_giou(a, b) -> np.ndarray:
    """GIoU matrix. Raises ValueError if some pair has two zero-area boxes."""
    a = as_box_array(a)
    b = as_box_array(b)
    inter, union, hull, area_a, area_b = _inter_union_hull(a, b)
    deg_a = area_a <= 0.0
    deg_b = area_b <= 0.0
    if deg_a.any() and deg_b.any():
        raise ValueError("undefined GIoU: both boxes are degenerate")
    degenerate = deg_a[:, None] | deg_b[None, :]
    iou = np.where(degenerate, 0.0, inter / np.where(union > 0.0, union, 1.0))
    return iou - (hull - union) / hull


def pairwise_query_distance(a, b) -> np.ndarray:
    return 1.0 - pairwise_giou(a, b)


def iou(a: BBox, b: BBox) -> float:
    return float(pairwise_iou([a], [b])[0, 0])


def giou(a: BBox, b: BBox) -> float:
    return float(pairwise_giou([a], [b])[0, 0])


def query_distance(a: BBox, b: BBox) -> float:
    """``1 - GIoU(a, b)``: 0 for identical boxes, approaching 2 as they separate."""
    return 1.0 - giou(a, b)


def intersection_area(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Elementwise intersection area of two broadcastable corner arrays."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    w = np.clip(np.minimum(a[..., 2], b[..., 2]) - np.maximum(a[..., 0], b[..., 0]), 0.0, None)
    h = np.clip(np.minimum(a[..., 3], b[..., 3]) - np.maximum(a[..., 1], b[..., 1]), 0.0, None)
    return w * h
