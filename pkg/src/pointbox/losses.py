"""Box regression and classification losses with analytic gradients.

The locally-constrained regression loss has three parts per positive anchor:

* a center term, squared error of the predicted center offsets against the
  anchor-normalised offsets of the annotated point;
* width and height terms that are zero while the predicted extent sits inside
  ``[mu - 3 sigma, mu + 3 sigma]`` of the pseudo boxes in a three-row band of
  the feature grid, and quadratic outside it.

Extents are compared in log space by default (``mode="log"``).  ``"pixel"``
compares anchor-normalised pixel widths instead, and ``"classic"`` is plain
squared error on all four encoded deltas against the pseudo box.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .geometry import DELTA_CLAMP, encode_array

SIGMA_WIDTH = 3.0
MIN_BOUND = 1.0
REG_MODES = ("log", "pixel", "classic")


class BandStats(NamedTuple):
    row: int
    mu_w: float
    sigma_w: float
    mu_h: float
    sigma_h: float
    count: int

    @property
    def constrained(self) -> bool:
        return self.count >= 2

    def bounds(self) -> tuple[float, float, float, float]:
        """(lower_w, upper_w, lower_h, upper_h) of the dead zone."""
        return (max(self.mu_w - SIGMA_WIDTH * self.sigma_w, MIN_BOUND),
                self.mu_w + SIGMA_WIDTH * self.sigma_w,
                max(self.mu_h - SIGMA_WIDTH * self.sigma_h, MIN_BOUND),
                self.mu_h + SIGMA_WIDTH * self.sigma_h)


def box_rows(boxes: np.ndarray, stride: int, n_rows: int) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    return np.clip(np.floor(boxes[:, 1] / stride).astype(int), 0, n_rows - 1)


def band_stats(boxes: np.ndarray, stride: int, n_rows: int) -> list[BandStats]:
    """Population mean/std of pseudo box widths and heights over rows i-1..i+1."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    rows = box_rows(boxes, stride, n_rows)
    out = []
    for i in range(n_rows):
        sel = boxes[np.abs(rows - i) <= 1]
        if len(sel) < 2:
            out.append(BandStats(i, 0.0, 0.0, 0.0, 0.0, len(sel)))
            continue
        w, h = sel[:, 2], sel[:, 3]
        out.append(BandStats(i, float(w.mean()), float(w.std()),
                             float(h.mean()), float(h.std()), len(sel)))
    return out


def _bounds_table(stats: list[BandStats]) -> np.ndarray:
    """Per row: lower_w, upper_w, lower_h, upper_h, constrained flag."""
    table = np.zeros((len(stats), 5))
    table[:, :4] = MIN_BOUND  # placeholder bounds keep log() finite for unconstrained rows
    for s in stats:
        if s.constrained:
            table[s.row, :4] = s.bounds()
            table[s.row, 4] = 1.0
    return table


@dataclass
class LossBreakdown:
    """Regression loss parts, each already divided by ``n_pos``.

    ``reg_total`` is their sum; multiply by ``n_pos`` for the per-image sum.
    ``grad`` is d(reg_total)/d(deltas), shape ``(n_pos, 4)``.
    """
    lxy_sum: float
    lw_sum: float
    lh_sum: float
    reg_total: float
    n_pos: int
    grad: np.ndarray


def _band_penalty(log_pred, pred, lower, upper, anchor_len, mode):
    """Penalty and d/d(log_pred) for values outside [lower, upper]."""
    above = pred > upper
    below = pred < lower
    if mode == "log":
        diff = np.where(above, log_pred - np.log(upper),
                        np.where(below, log_pred - np.log(lower), 0.0))
        return diff ** 2, 2.0 * diff
    # anchor-normalised pixel space; d(pred)/d(log_pred) = pred
    diff = np.where(above, pred - upper, np.where(below, pred - lower, 0.0)) / anchor_len
    return diff ** 2, 2.0 * diff * pred / anchor_len


def reg_loss(deltas: np.ndarray, anchors: np.ndarray, targets: np.ndarray,
             rows: np.ndarray | None = None, stats: list[BandStats] | None = None,
             mode: str = "log") -> LossBreakdown:
    """Regression loss over positive anchors.

    ``deltas``, ``anchors`` and ``targets`` (the matched pseudo boxes) are
    ``(P, 4)``; ``rows`` holds each anchor's feature-grid row for the band
    lookup in ``stats``.
    """
    if mode not in REG_MODES:
        raise ValueError(f"unknown regression mode {mode!r}")
    deltas = np.asarray(deltas, dtype=np.float64).reshape(-1, 4)
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    targets = np.asarray(targets, dtype=np.float64).reshape(-1, 4)
    n = len(deltas)
    if n == 0:
        return LossBreakdown(0.0, 0.0, 0.0, 0.0, 0, np.zeros((0, 4)))

    t = encode_array(anchors, targets)
    grad = np.zeros((n, 4))
    dxy = deltas[:, :2] - t[:, :2]
    lxy = float((dxy ** 2).sum())
    grad[:, :2] = 2.0 * dxy

    if mode == "classic":
        dwh = deltas[:, 2:] - t[:, 2:]
        lw = float((dwh[:, 0] ** 2).sum())
        lh = float((dwh[:, 1] ** 2).sum())
        grad[:, 2:] = 2.0 * dwh
    else:
        table = _bounds_table(stats)[np.asarray(rows, dtype=int)]
        on = table[:, 4] > 0
        dwh = np.clip(deltas[:, 2:], -DELTA_CLAMP, DELTA_CLAMP)
        inside_clamp = np.abs(deltas[:, 2:]) < DELTA_CLAMP
        log_wh = np.log(anchors[:, 2:]) + dwh
        wh = np.exp(log_wh)
        pen_w, g_w = _band_penalty(log_wh[:, 0], wh[:, 0], table[:, 0], table[:, 1],
                                   anchors[:, 2], mode)
        pen_h, g_h = _band_penalty(log_wh[:, 1], wh[:, 1], table[:, 2], table[:, 3],
                                   anchors[:, 3], mode)
        pen_w, g_w = np.where(on, pen_w, 0.0), np.where(on, g_w, 0.0)
        pen_h, g_h = np.where(on, pen_h, 0.0), np.where(on, g_h, 0.0)
        lw, lh = float(pen_w.sum()), float(pen_h.sum())
        grad[:, 2] = g_w * inside_clamp[:, 0]
        grad[:, 3] = g_h * inside_clamp[:, 1]

    lxy_sum, lw_sum, lh_sum = lxy / n, lw / n, lh / n
    return LossBreakdown(lxy_sum, lw_sum, lh_sum, lxy_sum + lw_sum + lh_sum, n, grad / n)


def bce_per_anchor(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    return np.maximum(z, 0.0) - y * z + np.log1p(np.exp(-np.abs(z)))


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def cls_loss(logits: np.ndarray, labels: np.ndarray,
             selected: np.ndarray | None = None) -> tuple[float, np.ndarray]:
    """Mean sigmoid cross-entropy over selected anchors, and its gradient.

    ``labels`` are 0/1 targets; unselected anchors get zero gradient.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if selected is None:
        selected = np.ones(logits.shape, bool)
    n = int(selected.sum())
    grad = np.zeros_like(logits)
    if n == 0:
        return 0.0, grad
    z, y = logits[selected], labels[selected]
    loss = float(bce_per_anchor(z, y).sum() / n)
    grad[selected] = (sigmoid(z) - y) / n
    return loss, grad


def ohem_select(neg_losses: np.ndarray, n_pos: int, ratio: int = 3,
                floor: int = 8, cap: int = 256) -> np.ndarray:
    """Indices of the hardest negatives.

    Keeps ``ratio * n_pos`` negatives, or ``floor`` for a background-only
    image, never more than ``cap``.  Equal losses go to the lower index.
    """
    neg_losses = np.asarray(neg_losses, dtype=np.float64)
    k = ratio * n_pos if n_pos > 0 else floor
    k = min(k, cap, len(neg_losses))
    order = np.lexsort((np.arange(len(neg_losses)), -neg_losses))
    return order[:k]
