"""Image difficulty from nearest-neighbour distances and the fold schedule.

An image is easy when its heads' nearest-neighbour distances sit near the
dataset mean.  Images are sorted by difficulty, cut into ``Z`` equal folds,
and training starts on the easiest fold, adding one fold per stage.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .errors import DegenerateDataset, InsufficientData, TooFewImages

N_FOLDS = 3
STAGE_EPOCHS = 10
_BELOW_ONE = float(np.nextafter(1.0, 0.0))


@dataclass(frozen=True)
class CurriculumScore:
    image_id: str
    tl: float
    mean_phi: float


def dataset_moments(nn_dists: Sequence[float]) -> tuple[float, float]:
    """Population mean and standard deviation of all head NN distances."""
    d = np.asarray(nn_dists, dtype=np.float64).ravel()
    if len(d) < 2:
        raise InsufficientData("need at least two head distances")
    mu = float(d.mean())
    sigma = float(d.std())
    if sigma == 0.0:
        raise DegenerateDataset("all nearest-neighbour distances are equal")
    return mu, sigma


def phi(d, mu: float, sigma: float):
    """Gaussian bump with peak value 1 at ``mu``."""
    d = np.asarray(d, dtype=np.float64)
    return np.exp(-((d - mu) ** 2) / (2.0 * sigma * sigma))


def difficulty(image_id: str, nn_dists: Sequence[float], mu: float, sigma: float) -> CurriculumScore:
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    m = float(np.mean(phi(nn_dists, mu, sigma)))
    # 1 - m rounds to 1.0 once m < 2**-53; keep the half-open range
    return CurriculumScore(image_id, min(1.0 - m, _BELOW_ONE), m)


def split_folds(scores: Sequence[CurriculumScore], n_folds: int = N_FOLDS) -> dict[str, int]:
    """Map image id to fold 1..Z; fold 1 holds the easiest images."""
    if len(scores) < n_folds:
        raise TooFewImages(f"{len(scores)} images cannot fill {n_folds} folds")
    ordered = sorted(scores, key=lambda s: (s.tl, s.image_id))
    base, extra = divmod(len(ordered), n_folds)
    out = {}
    pos = 0
    for fold in range(1, n_folds + 1):
        size = base + (1 if fold <= extra else 0)
        for s in ordered[pos:pos + size]:
            out[s.image_id] = fold
        pos += size
    return out


def active_set(epoch: int, stage_epochs: int = STAGE_EPOCHS, n_folds: int = N_FOLDS) -> set[int]:
    stage = min(epoch // stage_epochs, n_folds - 1)
    return set(range(1, stage + 2))


def active_ids(folds: Mapping[str, int], epoch: int, stage_epochs: int = STAGE_EPOCHS,
               n_folds: int = N_FOLDS) -> list[str]:
    live = active_set(epoch, stage_epochs, n_folds)
    return sorted(k for k, f in folds.items() if f in live)

