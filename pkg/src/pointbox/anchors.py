"""Anchor sets from clustered nearest-neighbour distances, anchor grids and
IoU-based anchor labelling."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .errors import IndivisibleImage, InsufficientData
from .geometry import iou_matrix

ASPECTS = (0.5, 0.75, 1.0, 1.33, 2.0)
N_SCALES = 5
LAYER_STRIDES = {1: 8, 2: 16}
POS_IOU = 0.7
NEG_IOU = 0.3

NEGATIVE = -1
IGNORE = -2


class AnchorSpec(NamedTuple):
    scale: float
    aspect: float

    @property
    def wh(self) -> tuple[float, float]:
        r = math.sqrt(self.aspect)
        return self.scale * r, self.scale / r


def cluster_scales(nn_dists: Sequence[float], k: int = N_SCALES,
                   max_iter: int = 100) -> np.ndarray:
    """1-D Lloyd k-means; centroids start at the k quantile midpoints."""
    x = np.sort(np.asarray(nn_dists, dtype=np.float64).ravel())
    if k < 1 or len(x) < k:
        raise InsufficientData(f"need at least k={k} distances, got {len(x)}")
    centroids = np.quantile(x, (np.arange(k) + 0.5) / k)
    assign = None
    for _ in range(max_iter):
        new_assign = np.abs(x[:, None] - centroids[None, :]).argmin(axis=1)
        if assign is not None and np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for c in range(k):
            members = x[assign == c]
            if len(members):
                centroids[c] = members.mean()
    return np.sort(centroids)


def build_specs(scales: Sequence[float], aspects: Sequence[float] = ASPECTS) -> list[AnchorSpec]:
    return [AnchorSpec(float(s), float(a)) for s in scales for a in aspects]


@dataclass(frozen=True)
class AnchorGrid:
    stride: int
    rows: int
    cols: int
    specs: tuple[AnchorSpec, ...]
    layer: int

    def boxes(self) -> np.ndarray:
        """All anchors as ``(rows * cols * T, 4)``, ordered by (i, j, t)."""
        wh = np.array([s.wh for s in self.specs])
        cy = (np.arange(self.rows) + 0.5) * self.stride
        cx = (np.arange(self.cols) + 0.5) * self.stride
        t = len(self.specs)
        out = np.empty((self.rows, self.cols, t, 4))
        out[..., 0] = cx[None, :, None]
        out[..., 1] = cy[:, None, None]
        out[..., 2] = wh[:, 0]
        out[..., 3] = wh[:, 1]
        return out.reshape(-1, 4)

    def row_of(self) -> np.ndarray:
        """Grid row of every anchor in :meth:`boxes` order."""
        return np.repeat(np.arange(self.rows), self.cols * len(self.specs))


def build_grid(width: int, height: int, layer: int, specs: Sequence[AnchorSpec]) -> AnchorGrid:
    stride = LAYER_STRIDES[layer]
    if width % stride or height % stride:
        raise IndivisibleImage(f"{width}x{height} not divisible by stride {stride}")
    return AnchorGrid(stride, height // stride, width // stride, tuple(specs), layer)


@dataclass
class MatchLabels:
    labels: np.ndarray        # per anchor: gt index >= 0, NEGATIVE or IGNORE
    max_iou: np.ndarray       # per anchor best IoU over gts
    ignored_gts: np.ndarray   # bool per gt: no positive anchor this round

    @property
    def positive(self) -> np.ndarray:
        return self.labels >= 0

    @property
    def negative(self) -> np.ndarray:
        return self.labels == NEGATIVE


def match(anchors: np.ndarray, gts: np.ndarray,
          pos_iou: float = POS_IOU, neg_iou: float = NEG_IOU) -> MatchLabels:
    """Label anchors against pseudo boxes.

    Positive at IoU >= ``pos_iou`` (assigned to the argmax box), negative below
    ``neg_iou``, ignored in between.  A box left without positives gets its
    best anchor forced positive when that IoU reaches ``neg_iou``; otherwise
    the box is reported in ``ignored_gts``.
    """
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    gts = np.asarray(gts, dtype=np.float64).reshape(-1, 4)
    n_anchor = len(anchors)
    if len(gts) == 0:
        return MatchLabels(np.full(n_anchor, NEGATIVE), np.zeros(n_anchor), np.zeros(0, bool))

    ious = iou_matrix(anchors, gts)
    best_gt = ious.argmax(axis=1)
    best = ious[np.arange(n_anchor), best_gt]
    labels = np.full(n_anchor, IGNORE)
    labels[best < neg_iou] = NEGATIVE
    pos = best >= pos_iou
    labels[pos] = best_gt[pos]

    has_pos = np.zeros(len(gts), bool)
    has_pos[best_gt[pos]] = True
    forced_iou = {}
    for g in np.flatnonzero(~has_pos):
        # threshold positives keep their box; pick the best remaining anchor
        col = np.where(pos, -1.0, ious[:, g])
        a = int(col.argmax())
        v = col[a]
        if v < neg_iou:
            continue
        if a not in forced_iou or v > forced_iou[a]:
            forced_iou[a] = v
            labels[a] = g
    has_pos = np.zeros(len(gts), bool)
    has_pos[labels[labels >= 0]] = True
    return MatchLabels(labels, best, ~has_pos)
