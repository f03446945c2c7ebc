"""Points, center-form boxes, IoU and the anchor/box delta transform.

Scalar helpers work on :class:`Point`, :class:`Box` and :class:`RegDeltas`;
the ``*_array`` variants take ``(n, 4)`` float arrays in ``(cx, cy, w, h)``
order and are what the training loop uses.
"""

from __future__ import annotations

import math
from typing import NamedTuple, Sequence

import numpy as np

from .errors import FewerThanTwoPoints

DELTA_CLAMP = 4.0


class Point(NamedTuple):
    x: float
    y: float


class Box(NamedTuple):
    cx: float
    cy: float
    w: float
    h: float

    @property
    def corners(self) -> tuple[float, float, float, float]:
        return (self.cx - self.w / 2, self.cy - self.h / 2,
                self.cx + self.w / 2, self.cy + self.h / 2)

    @classmethod
    def from_corners(cls, x1: float, y1: float, x2: float, y2: float) -> "Box":
        return cls((x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1)

    @property
    def area(self) -> float:
        return self.w * self.h


class RegDeltas(NamedTuple):
    dx: float
    dy: float
    dw: float
    dh: float


def iou(a: Box, b: Box) -> float:
    ax1, ay1, ax2, ay2 = a.corners
    bx1, by1, bx2, by2 = b.corners
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    # areas from the same corners as the intersection, so iou(a, a) == 1 exactly
    area_a = (ax2 - ax1) * (ay2 - ay1)
    area_b = (bx2 - bx1) * (by2 - by1)
    return inter / (area_a + area_b - inter)


def to_corners(boxes: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64)
    half = boxes[..., 2:] / 2
    return np.concatenate([boxes[..., :2] - half, boxes[..., :2] + half], axis=-1)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU, shape ``(len(a), len(b))``."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ca, cb = to_corners(a), to_corners(b)
    iw = np.minimum(ca[:, None, 2], cb[None, :, 2]) - np.maximum(ca[:, None, 0], cb[None, :, 0])
    ih = np.minimum(ca[:, None, 3], cb[None, :, 3]) - np.maximum(ca[:, None, 1], cb[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (ca[:, 2] - ca[:, 0]) * (ca[:, 3] - ca[:, 1])
    area_b = (cb[:, 2] - cb[:, 0]) * (cb[:, 3] - cb[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return inter / union


def decode(a: Box, d: RegDeltas) -> Box:
    dw = min(max(d.dw, -DELTA_CLAMP), DELTA_CLAMP)
    dh = min(max(d.dh, -DELTA_CLAMP), DELTA_CLAMP)
    return Box(a.w * d.dx + a.cx, a.h * d.dy + a.cy,
               a.w * math.exp(dw), a.h * math.exp(dh))


def encode(a: Box, g: Box) -> RegDeltas:
    return RegDeltas((g.cx - a.cx) / a.w, (g.cy - a.cy) / a.h,
                     math.log(g.w / a.w), math.log(g.h / a.h))


def decode_array(anchors: np.ndarray, deltas: np.ndarray) -> np.ndarray:
    anchors = np.asarray(anchors, dtype=np.float64)
    deltas = np.asarray(deltas, dtype=np.float64)
    dwh = np.clip(deltas[..., 2:], -DELTA_CLAMP, DELTA_CLAMP)
    out = np.empty(np.broadcast_shapes(anchors.shape, deltas.shape))
    out[..., :2] = anchors[..., 2:] * deltas[..., :2] + anchors[..., :2]
    out[..., 2:] = anchors[..., 2:] * np.exp(dwh)
    return out


def encode_array(anchors: np.ndarray, targets: np.ndarray) -> np.ndarray:
    anchors = np.asarray(anchors, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    out = np.empty(np.broadcast_shapes(anchors.shape, targets.shape))
    out[..., :2] = (targets[..., :2] - anchors[..., :2]) / anchors[..., 2:]
    out[..., 2:] = np.log(targets[..., 2:] / anchors[..., 2:])
    return out


def nn_distances(points: Sequence[Point] | np.ndarray) -> np.ndarray:
    """Distance from each point to its nearest other point, in input order."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    n = len(pts)
    if n < 2:
        raise FewerThanTwoPoints(f"need at least 2 points, got {n}")
    out = np.empty(n)
    # row blocks keep the pairwise matrix small for dense scenes
    for start in range(0, n, 512):
        block = pts[start:start + 512]
        dx = block[:, None, 0] - pts[None, :, 0]
        dy = block[:, None, 1] - pts[None, :, 1]
        sq = dx * dx + dy * dy
        sq[np.arange(len(block)), np.arange(start, start + len(block))] = np.inf
        out[start:start + len(block)] = np.sqrt(sq.min(axis=1))
    return out
