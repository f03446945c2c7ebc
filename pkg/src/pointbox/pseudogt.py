"""Pseudo ground-truth boxes for point-annotated heads.

A pseudo box starts as the anchor shape closest to the square whose side is
the head's nearest-neighbour distance.  After each epoch it may be replaced by
the best-scored prediction of one of its positive anchors, provided that
prediction's smaller side stays under the nearest-neighbour distance.  The box
center is always the annotated point.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .anchors import AnchorSpec
from .geometry import Box, Point


@dataclass
class PseudoGT:
    point: Point
    box: Box
    cap: float
    active: bool = True
    history: list = field(default_factory=list)   # (epoch, w, h)

    def as_array(self) -> np.ndarray:
        return np.array(self.box, dtype=np.float64)


def snap_cost(spec: AnchorSpec, side: float) -> float:
    w, h = spec.wh
    return abs(math.log(w * h / (side * side))) + abs(math.log(spec.aspect))


def init(points: Sequence, nn_dists: Sequence[float],
         specs: Sequence[AnchorSpec]) -> list[PseudoGT]:
    if len(points) != len(nn_dists):
        raise ValueError("points and nn_dists differ in length")
    if len(points) < 2:
        raise ValueError("need at least two heads")
    out = []
    for (x, y), d in zip(points, nn_dists):
        best = min(specs, key=lambda s: snap_cost(s, d))
        w, h = best.wh
        p = Point(float(x), float(y))
        out.append(PseudoGT(p, Box(p.x, p.y, w, h), float(d), True, [(0, w, h)]))
    return out


def update(pgt: PseudoGT, candidates: Iterable[tuple[Box, float]],
           epoch: int | None = None) -> PseudoGT:
    """Apply one end-of-epoch update in place and return ``pgt``.

    ``candidates`` are (decoded prediction, score) pairs from the head's
    positive anchors.  No candidates at all marks the head inactive.
    """
    candidates = list(candidates)
    if not candidates:
        pgt.active = False
    else:
        pgt.active = True
        best = None
        for box, score in candidates:
            if min(box.w, box.h) < pgt.cap and (best is None or score > best[1]):
                best = (box, score)
        if best is not None:
            pgt.box = Box(pgt.point.x, pgt.point.y, float(best[0].w), float(best[0].h))
    if epoch is not None:
        pgt.history.append((epoch, pgt.box.w, pgt.box.h))
    return pgt


def boxes_array(pgts: Sequence[PseudoGT], active_only: bool = False) -> np.ndarray:
    rows = [g.box for g in pgts if g.active or not active_only]
    return np.array(rows, dtype=np.float64).reshape(-1, 4)
