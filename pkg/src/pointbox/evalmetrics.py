"""Detection and counting metrics for point-annotated crowds.

A detection is good when an unmatched head point lies within ``c`` pixels of
its center and both its sides are below ``r`` times that head's
nearest-neighbour distance.  AP is pooled over the dataset.  Counting is
scored with MAE, root-mean-square error and GAME(L).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .geometry import Box, iou_matrix, nn_distances


@dataclass(frozen=True)
class EvalProtocol:
    c: float = 20.0
    r: float = 1.0
    confidence: float = 0.8
    nms_iou: float = 0.3

    def __post_init__(self):
        if not self.c > 0:
            raise ValueError(f"c must be positive, got {self.c}")
        if not self.r > 0:
            raise ValueError(f"r must be positive or inf, got {self.r}")


class Detection(NamedTuple):
    box: Box
    score: float


def score_order(scores: np.ndarray) -> np.ndarray:
    """Indices by descending score; equal scores keep input order."""
    scores = np.asarray(scores, dtype=np.float64)
    return np.lexsort((np.arange(len(scores)), -scores))


def nms(boxes: np.ndarray, scores: np.ndarray, iou_thresh: float = 0.3) -> np.ndarray:
    """Greedy suppression; returns kept indices in descending-score order."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    order = score_order(scores)
    keep = []
    while len(order):
        i = order[0]
        keep.append(i)
        if len(order) == 1:
            break
        ious = iou_matrix(boxes[i:i + 1], boxes[order[1:]])[0]
        order = order[1:][ious <= iou_thresh]
    return np.array(keep, dtype=int)


def gt_nn_distances(points: np.ndarray) -> np.ndarray:
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if len(points) < 2:
        return np.full(len(points), np.inf)
    return nn_distances(points)


def good_detection(box, points: np.ndarray, nn: np.ndarray, used: np.ndarray,
                   protocol: EvalProtocol, conjunctive: bool = True) -> int | None:
    """Nearest unused head that ``box`` detects well, or None.

    The chosen head is marked in ``used``.  Callers feed detections in
    descending score order.
    """
    if len(points) == 0:
        return None
    cx, cy, w, h = box
    dist = np.hypot(points[:, 0] - cx, points[:, 1] - cy)
    limit = protocol.r * nn
    size_ok = (w < limit) & (h < limit) if conjunctive else (w < limit) | (h < limit)
    ok = (~used) & (dist < protocol.c) & size_ok
    if not ok.any():
        return None
    cand = np.flatnonzero(ok)
    g = int(cand[np.argmin(dist[cand])])
    used[g] = True
    return g


def _greedy(boxes, scores, points, nn, protocol, conjunctive):
    matched = np.full(len(boxes), -1)
    used = np.zeros(len(points), bool)
    for i in score_order(scores):
        g = good_detection(boxes[i], points, nn, used, protocol, conjunctive)
        if g is not None:
            matched[i] = g
    return matched


@dataclass
class ImageMatch:
    matched_gt: np.ndarray     # per detection (input order): gt index or -1
    n_good_disjunctive: int    # good count if either side below r*d suffices


def match_image(boxes: np.ndarray, scores: np.ndarray, points: np.ndarray,
                protocol: EvalProtocol, nn: np.ndarray | None = None) -> ImageMatch:
    """Greedy good-detection matching for one image, highest score first."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if nn is None:
        nn = gt_nn_distances(points)
    conj = _greedy(boxes, scores, points, nn, protocol, True)
    disj = _greedy(boxes, scores, points, nn, protocol, False)
    return ImageMatch(conj, int((disj >= 0).sum()))


@dataclass
class PRCurve:
    precision: np.ndarray
    recall: np.ndarray
    scores: np.ndarray
    ap: float


def all_points_ap(precision: np.ndarray, recall: np.ndarray) -> float:
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def average_precision(detections: Sequence[tuple[np.ndarray, np.ndarray]],
                      gt_points: Sequence[np.ndarray], protocol: EvalProtocol) -> PRCurve:
    """Dataset-pooled AP.

    ``detections[k]`` is ``(boxes, scores)`` for image ``k``; ``gt_points[k]``
    are its annotated heads.
    """
    all_scores, all_tp, img_idx, det_rank = [], [], [], []
    n_gt = 0
    for k, ((boxes, scores), pts) in enumerate(zip(detections, gt_points)):
        pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
        n_gt += len(pts)
        scores = np.asarray(scores, dtype=np.float64)
        m = match_image(boxes, scores, pts, protocol)
        rank = np.empty(len(scores), int)
        rank[score_order(scores)] = np.arange(len(scores))
        all_scores.append(scores)
        all_tp.append(m.matched_gt >= 0)
        img_idx.append(np.full(len(scores), k))
        det_rank.append(rank)
    if not all_scores or n_gt == 0:
        return PRCurve(np.zeros(0), np.zeros(0), np.zeros(0), 0.0)
    scores = np.concatenate(all_scores)
    tp = np.concatenate(all_tp)
    order = np.lexsort((np.concatenate(det_rank), np.concatenate(img_idx), -scores))
    tp = tp[order].astype(np.float64)
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1.0 - tp)
    recall = ctp / n_gt
    precision = ctp / np.maximum(ctp + cfp, np.finfo(np.float64).tiny)
    ap = all_points_ap(precision, recall) if len(tp) else 0.0
    return PRCurve(precision, recall, scores[order], ap)


def mae_mse(est_counts: Sequence[int], gt_counts: Sequence[int]) -> tuple[float, float]:
    """MAE and the root of the mean squared count error."""
    err = np.asarray(est_counts, dtype=np.int64) - np.asarray(gt_counts, dtype=np.int64)
    if len(err) == 0:
        return 0.0, 0.0
    return float(np.mean(np.abs(err))), float(math.sqrt(np.mean(err.astype(np.float64) ** 2)))


def cell_index(coord: np.ndarray, extent: float, n: int) -> np.ndarray:
    """Cell of each coordinate; a point on a boundary goes to the lower cell."""
    idx = np.ceil(np.asarray(coord, dtype=np.float64) * n / extent).astype(np.int64) - 1
    return np.clip(idx, 0, n - 1)


def cell_counts(points: np.ndarray, width: float, height: float, level: int) -> np.ndarray:
    n = 2 ** level
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    counts = np.zeros((n, n), dtype=np.int64)
    if len(points):
        np.add.at(counts, (cell_index(points[:, 1], height, n), cell_index(points[:, 0], width, n)), 1)
    return counts


def game(det_centers: Sequence[np.ndarray], gt_points: Sequence[np.ndarray],
         dims: Sequence[tuple[float, float]], level: int) -> float:
    """Grid Average Mean absolute Error over ``4**level`` cells per image.

    ``dims[k]`` is ``(width, height)`` of image ``k``.
    """
    if level < 0:
        raise ValueError("level must be >= 0")
    errs = np.array([int(np.abs(cell_counts(d, w, h, level) - cell_counts(g, w, h, level)).sum())
                     for d, g, (w, h) in zip(det_centers, gt_points, dims)], dtype=np.int64)
    if len(errs) == 0:
        return 0.0
    return float(np.mean(errs))


def relative_size_error(wh: np.ndarray, true_boxes: np.ndarray) -> np.ndarray:
    """``|side - true side| / true side`` with side the geometric mean of w and h."""
    wh = np.asarray(wh, dtype=np.float64).reshape(-1, 2)
    tb = np.asarray(true_boxes, dtype=np.float64).reshape(-1, 4)
    side = np.sqrt(wh[:, 0] * wh[:, 1])
    true = np.sqrt(tb[:, 2] * tb[:, 3])
    return np.abs(side - true) / true
