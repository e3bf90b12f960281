"""Axis-aligned boxes, anchor-relative target encoding, and IoU.

Boxes are stored center-size ``(cx, cy, w, h)`` in pixels. The vectorised
helpers work on ``(N, 4)`` arrays in the same layout.
"""
from __future__ import annotations

import math
from typing import NamedTuple

import numpy as np

from . import kernels

MIN_SIDE = 1e-12


def _check_box(cx, cy, w, h, kind):
    vals = (cx, cy, w, h)
    if not all(math.isfinite(v) for v in vals):
        raise ValueError(f"{kind} fields must be finite, got {vals}")
    if w <= MIN_SIDE or h <= MIN_SIDE:
        raise ValueError(f"{kind} needs positive width and height, got w={w}, h={h}")


class BoundingBox(NamedTuple):
    cx: float
    cy: float
    w: float
    h: float

    @classmethod
    def make(cls, cx, cy, w, h):
        """Validated constructor."""
        cx, cy, w, h = float(cx), float(cy), float(w), float(h)
        _check_box(cx, cy, w, h, cls.__name__)
        return cls(cx, cy, w, h)

    @classmethod
    def from_corners(cls, x0, y0, x1, y1):
        return cls.make(0.5 * (x0 + x1), 0.5 * (y0 + y1), x1 - x0, y1 - y0)

    @property
    def corners(self):
        """``(x0, y0, x1, y1)``."""
        return (self.cx - 0.5 * self.w, self.cy - 0.5 * self.h,
                self.cx + 0.5 * self.w, self.cy + 0.5 * self.h)

    @property
    def area(self):
        return self.w * self.h

    @property
    def side(self):
        """Geometric-mean side length, used for scale binning."""
        return math.sqrt(self.w * self.h)


class Anchor(BoundingBox):
    pass


class RegressionTarget(NamedTuple):
    tx: float
    ty: float
    tw: float
    th: float


def encode(box, anchor):
    """Anchor-relative regression target of ``box``."""
    _check_box(*box, "box")
    _check_box(*anchor, "anchor")
    return RegressionTarget(
        (box[0] - anchor[0]) / anchor[2],
        (box[1] - anchor[1]) / anchor[3],
        math.log(box[2] / anchor[2]),
        math.log(box[3] / anchor[3]),
    )


def decode(t, anchor):
    """Inverse of :func:`encode`."""
    _check_box(*anchor, "anchor")
    return BoundingBox(
        anchor[0] + t[0] * anchor[2],
        anchor[1] + t[1] * anchor[3],
        anchor[2] * math.exp(t[2]),
        anchor[3] * math.exp(t[3]),
    )


def iou(a, b):
    """Intersection over union of two boxes; exactly 0 when disjoint."""
    ax0, ay0, ax1, ay1 = BoundingBox(*a).corners
    bx0, by0, bx1, by1 = BoundingBox(*b).corners
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    # areas from the same rounded corners, so inter <= each area and iou(a, a) == 1
    area_a = (ax1 - ax0) * (ay1 - ay0)
    area_b = (bx1 - bx0) * (by1 - by0)
    return inter / (area_a + area_b - inter)


def shift_iou_drop(side, shift):
    """Relative IoU loss when a square box of ``side`` px moves ``shift`` px along one axis."""
    a = BoundingBox(0.0, 0.0, side, side)
    return 1.0 - iou(a, BoundingBox(shift, 0.0, side, side))


# -- array versions ----------------------------------------------------------

def _check_boxes(arr, kind):
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 4:
        raise ValueError(f"{kind} array must have shape (N, 4), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{kind} array has non-finite entries")
    if np.any(arr[:, 2:] <= MIN_SIDE):
        raise ValueError(f"{kind} array has non-positive widths or heights")
    return arr


def encode_array(boxes, anchors):
    boxes = _check_boxes(boxes, "box")
    anchors = _check_boxes(anchors, "anchor")
    out = np.empty_like(boxes)
    out[:, :2] = (boxes[:, :2] - anchors[:, :2]) / anchors[:, 2:]
    out[:, 2:] = np.log(boxes[:, 2:] / anchors[:, 2:])
    return out


def decode_array(targets, anchors):
    anchors = _check_boxes(anchors, "anchor")
    t = np.asarray(targets, dtype=np.float64)
    out = np.empty_like(anchors)
    out[:, :2] = anchors[:, :2] + t[:, :2] * anchors[:, 2:]
    out[:, 2:] = anchors[:, 2:] * np.exp(t[:, 2:])
    return out


def iou_array(a, b):
    """Row-wise IoU of two ``(N, 4)`` arrays."""
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("box arrays must have the same shape")
    return kernels.iou_aligned(a, b)
