"""Training loop, variant ladder and multi-scale prediction.

Variants add one mechanism each:

====  ================  ==================  ==========
name  pseudo updating   local width loss    curriculum
====  ================  ==================  ==========
Pv0   no                no (classic)        no
Pv1   yes               no (classic)        no
Pv2   yes               yes                 no
Pv3   yes               yes                 yes
====  ================  ==================  ==========

Training only ever sees :class:`~pointbox.synthcrowd.TrainScene` objects,
which carry no box annotations.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Sequence

import numpy as np
from scipy import ndimage

from . import anchors as anc
from . import curriculum as cur
from . import losses
from . import pseudogt
from . import tinydet
from .errors import DegenerateDataset, FormatError, NumericFailure
from .evalmetrics import EvalProtocol, mae_mse, nms
from .geometry import Box, decode_array, iou_matrix, nn_distances
from .synthcrowd import TrainScene

log = logging.getLogger(__name__)

VARIANTS = ("Pv0", "Pv1", "Pv2", "Pv3")
FUSED_STRIDE = anc.LAYER_STRIDES[1]


def mechanisms(variant: str) -> dict[str, bool]:
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    k = VARIANTS.index(variant)
    return {"update_pseudo": k >= 1, "local_loss": k >= 2, "curriculum": k >= 3}


@dataclass
class TrainConfig:
    variant: str = "Pv3"
    epochs: int = 30
    batch_size: int = 4
    lr: float = 1e-4
    momentum: float = 0.9
    weight_decay: float = 5e-4
    aug_scales: tuple = (0.5, 1.0, 1.5, 2.0)
    test_scales: tuple = (0.5, 1.0, 1.5, 2.0)
    crop: int = 256
    pos_iou: float = anc.POS_IOU
    neg_iou: float = anc.NEG_IOU
    ohem_ratio: int = 3
    n_folds: int = cur.N_FOLDS
    stage_epochs: int = cur.STAGE_EPOCHS
    reg_mode: str = "log"
    reg_weight: float = 1.0
    clip_norm: float = 0.0          # global gradient-norm cap; 0 disables
    val_every: int = 1
    seed: int = 0

    def __post_init__(self):
        mechanisms(self.variant)
        self.aug_scales = tuple(float(s) for s in self.aug_scales)
        self.test_scales = tuple(float(s) for s in self.test_scales)
        if self.reg_mode not in ("log", "pixel"):
            raise ValueError(f"reg_mode must be 'log' or 'pixel', got {self.reg_mode!r}")
        if self.epochs < 1 or self.batch_size < 1 or self.crop < 16:
            raise ValueError("epochs, batch_size must be >= 1 and crop >= 16")

    @property
    def flags(self) -> dict[str, bool]:
        return mechanisms(self.variant)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["aug_scales"] = list(self.aug_scales)
        d["test_scales"] = list(self.test_scales)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise FormatError(f"unknown config keys: {unknown}")
        return cls(**data)

    @classmethod
    def from_json(cls, text: str) -> "TrainConfig":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise FormatError(exc.msg, f"line {exc.lineno} column {exc.colno}") from exc
        if not isinstance(data, dict):
            raise FormatError("config must be a JSON object", "line 1")
        return cls.from_dict(data)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


# Desk scale trains a six-layer net from scratch on CPU in minutes, which
# needs a far larger (clipped) step than the ResNet fine-tuning rate.  At 0.5x
# most heads shrink below the smallest anchor, so desk runs stay at 1x.
DESK = dict(epochs=30, batch_size=4, lr=0.05, clip_norm=1.0, crop=256,
            aug_scales=(1.0,), test_scales=(1.0,))
PAPER = dict(epochs=50, batch_size=12, lr=1e-4, crop=500)


def desk_config(**overrides) -> TrainConfig:
    return TrainConfig(**{**DESK, **overrides})


def paper_config(**overrides) -> TrainConfig:
    return TrainConfig(**{**PAPER, **overrides})


# -- data split -------------------------------------------------------------

def is_val_id(image_id: str) -> bool:
    """Deterministic 80/20 split by id hash."""
    return hashlib.sha1(image_id.encode()).digest()[0] % 5 == 0


def split_train_val(scenes: Sequence[TrainScene]) -> tuple[list[TrainScene], list[TrainScene]]:
    train = [s for s in scenes if not is_val_id(s.id)]
    val = [s for s in scenes if is_val_id(s.id)]
    return train, val


# -- augmentation -----------------------------------------------------------

def rescale(image: np.ndarray, s: float) -> np.ndarray:
    """Bilinear resize by ``s``; pixel ``i`` covers ``[i, i+1)`` before and after."""
    if s == 1.0:
        return image.copy()
    h, w = image.shape
    oh, ow = max(int(round(h * s)), 1), max(int(round(w * s)), 1)
    ys = (np.arange(oh) + 0.5) / s - 0.5
    xs = (np.arange(ow) + 0.5) / s - 0.5
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return ndimage.map_coordinates(image, [yy, xx], order=1, mode="nearest")


def padded_size(n: int) -> int:
    return -(-n // 16) * 16


@dataclass
class Sample:
    image: np.ndarray        # (S, S), S = crop rounded up to a multiple of 16
    points: np.ndarray       # (k, 2) in sample pixels
    boxes: np.ndarray        # (k, 4) pseudo boxes in sample pixels
    gt_index: np.ndarray     # (k,) index into the scene's head list
    scale: float
    offset: tuple[int, int]  # (x, y) of the crop in the rescaled image

    def to_scene(self, boxes: np.ndarray) -> np.ndarray:
        """Map sample-pixel boxes back to scene pixels."""
        out = np.array(boxes, dtype=np.float64).reshape(-1, 4)
        out[:, 0] = (out[:, 0] + self.offset[0]) / self.scale
        out[:, 1] = (out[:, 1] + self.offset[1]) / self.scale
        out[:, 2:] /= self.scale
        return out


def augment(image: np.ndarray, points: np.ndarray, boxes: np.ndarray,
            rng: np.random.Generator, scales=(0.5, 1.0, 1.5, 2.0), crop: int = 256,
            max_tries: int = 10) -> Sample | None:
    """Random rescale plus random crop; ``None`` if every try lost all heads."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    side = padded_size(crop)
    for _ in range(max_tries):
        s = float(scales[rng.integers(len(scales))])
        img = rescale(image, s)
        hs, ws = img.shape
        oy = int(rng.integers(0, hs - crop + 1)) if hs > crop else 0
        ox = int(rng.integers(0, ws - crop + 1)) if ws > crop else 0
        ch, cw = min(crop, hs), min(crop, ws)
        pts = points * s
        keep = ((pts[:, 0] >= ox) & (pts[:, 0] < ox + cw) &
                (pts[:, 1] >= oy) & (pts[:, 1] < oy + ch))
        if not keep.any():
            continue
        out = np.zeros((side, side))
        out[:ch, :cw] = img[oy:oy + ch, ox:ox + cw]
        b = boxes[keep] * s
        b[:, 0] -= ox
        b[:, 1] -= oy
        return Sample(out, pts[keep] - (ox, oy), b, np.flatnonzero(keep), s, (ox, oy))
    return None


# -- per-image loss ---------------------------------------------------------

def anchor_view(fused_one: np.ndarray) -> np.ndarray:
    """(5T, R, C) map to (R*C*T, 5) rows in anchor order (i, j, t)."""
    c, r, cc = fused_one.shape
    t = c // tinydet.CHANNELS_PER_ANCHOR
    return fused_one.reshape(t, tinydet.CHANNELS_PER_ANCHOR, r, cc).transpose(2, 3, 0, 1).reshape(-1, 5)


def map_view(rows: np.ndarray, r: int, cc: int) -> np.ndarray:
    """Inverse of :func:`anchor_view`."""
    t = rows.shape[0] // (r * cc)
    return rows.reshape(r, cc, t, 5).transpose(2, 3, 0, 1).reshape(t * 5, r, cc)


@dataclass
class ImageLoss:
    cls: float
    reg: losses.LossBreakdown
    grad: np.ndarray           # d(loss)/d(anchor rows), (A, 5)
    labels: anc.MatchLabels
    total: float


def image_loss(pred_rows: np.ndarray, anchor_boxes: np.ndarray, anchor_rows: np.ndarray,
               grid_rows: int, pseudo: np.ndarray, cfg: TrainConfig) -> ImageLoss:
    """Classification + regression loss for one image's fused predictions."""
    labels = anc.match(anchor_boxes, pseudo, cfg.pos_iou, cfg.neg_iou)
    pos = np.flatnonzero(labels.positive)
    neg = np.flatnonzero(labels.negative)
    if labels.ignored_gts.any():
        # a head too small to match is left out entirely, so it supplies no negatives
        touches = (iou_matrix(anchor_boxes[neg], pseudo[labels.ignored_gts]) > 0).any(axis=1)
        neg = neg[~touches]
    logits = pred_rows[:, 0]
    neg_loss = losses.bce_per_anchor(logits[neg], 0.0)
    chosen = neg[losses.ohem_select(neg_loss, len(pos), cfg.ohem_ratio)]
    selected = np.zeros(len(logits), bool)
    selected[pos] = True
    selected[chosen] = True
    target = np.zeros(len(logits))
    target[pos] = 1.0
    cls_value, g_logit = losses.cls_loss(logits, target, selected)

    if cfg.flags["local_loss"]:
        stats = losses.band_stats(pseudo, FUSED_STRIDE, grid_rows)
        reg = losses.reg_loss(pred_rows[pos, 1:], anchor_boxes[pos], pseudo[labels.labels[pos]],
                              anchor_rows[pos], stats, cfg.reg_mode)
    else:
        reg = losses.reg_loss(pred_rows[pos, 1:], anchor_boxes[pos], pseudo[labels.labels[pos]],
                              mode="classic")
    grad = np.zeros_like(pred_rows)
    grad[:, 0] = g_logit
    grad[pos, 1:] = cfg.reg_weight * reg.grad
    return ImageLoss(cls_value, reg, grad, labels, cls_value + cfg.reg_weight * reg.reg_total)


# -- training state ---------------------------------------------------------

@dataclass
class EpochStats:
    epoch: int
    variant: str
    cls: float
    reg: float
    lxy: float
    lw: float
    lh: float
    val_mae: float
    val_mse: float
    active_folds: str
    n_images: int
    pseudo_median_side: float

    HEADER = ("epoch", "variant", "cls", "reg", "lxy", "lw", "lh", "val_mae", "val_mse",
              "active_folds", "n_images", "pseudo_median_side")

    def row(self) -> list:
        return [getattr(self, k) for k in self.HEADER]


@dataclass
class TrainState:
    config: TrainConfig
    params: dict
    specs: list
    pseudo: dict                  # scene id -> list[PseudoGT]
    folds: dict                   # scene id -> fold (all 1 unless curriculum)
    scores: dict                  # scene id -> CurriculumScore
    optimizer: tinydet.SGD
    epoch: int = 0
    history: list = field(default_factory=list)
    loss_log: list = field(default_factory=list)   # (epoch, id, lxy, lw, lh, cls)


def prepare(train: Sequence[TrainScene], cfg: TrainConfig) -> TrainState:
    """Anchors, pseudo boxes, difficulty folds and a fresh network."""
    for s in train:
        if not isinstance(s, TrainScene):
            raise TypeError("training accepts TrainScene (points-only) objects only")
    usable = [s for s in train if len(s.points) >= 2]
    if len(usable) < len(train):
        log.warning("skipping %d scenes with fewer than two heads", len(train) - len(usable))
    nn = {s.id: nn_distances(s.points) for s in usable}
    all_nn = np.concatenate(list(nn.values()))
    specs = anc.build_specs(anc.cluster_scales(all_nn, anc.N_SCALES))
    pseudo = {s.id: pseudogt.init(s.points, nn[s.id], specs) for s in usable}
    scores = {}
    try:
        mu, sigma = cur.dataset_moments(all_nn)
        scores = {s.id: cur.difficulty(s.id, nn[s.id], mu, sigma) for s in usable}
    except DegenerateDataset:
        log.warning("all head distances equal; curriculum collapses to one fold")
    if cfg.flags["curriculum"] and scores:
        folds = cur.split_folds(list(scores.values()), cfg.n_folds)
    else:
        folds = {s.id: 1 for s in usable}
    params = tinydet.init_params(cfg.seed)
    log.info("network has %d parameters", tinydet.param_count(params))
    opt = tinydet.SGD(cfg.lr, cfg.momentum, cfg.weight_decay)
    return TrainState(cfg, params, specs, pseudo, folds, scores, opt)


def working_set(state: TrainState, epoch: int) -> tuple[list[str], set[int]]:
    cfg = state.config
    if cfg.flags["curriculum"]:
        live = cur.active_set(epoch, cfg.stage_epochs, cfg.n_folds)
    else:
        live = {1}
    return sorted(k for k, f in state.folds.items() if f in live), live


def clip_gradients(grads: dict, max_norm: float) -> float:
    """Scale ``grads`` in place so their global L2 norm is at most ``max_norm``."""
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if max_norm > 0 and norm > max_norm:
        for g in grads.values():
            g *= max_norm / norm
    return norm


def train_epoch(state: TrainState, scenes: dict[str, TrainScene]) -> dict:
    """One pass over the active folds; pseudo boxes update at the end."""
    cfg = state.config
    epoch = state.epoch
    rng = np.random.default_rng([cfg.seed, epoch, 1])
    ids, live = working_set(state, epoch)
    order = [ids[i] for i in rng.permutation(len(ids))]

    for g_list in state.pseudo.values():
        for g in g_list:
            g.active = True
    snapshot = {k: pseudogt.boxes_array(v) for k, v in state.pseudo.items()}

    side = padded_size(cfg.crop)
    grid = anc.build_grid(side, side, 1, state.specs)
    anchor_boxes = grid.boxes()
    anchor_rows = grid.row_of()

    candidates: dict[str, dict[int, list]] = {}
    sums = np.zeros(5)
    n_img = 0
    for start in range(0, len(order), cfg.batch_size):
        batch = []
        for sid in order[start:start + cfg.batch_size]:
            sc = scenes[sid]
            sample = augment(sc.image, sc.points, snapshot[sid], rng, cfg.aug_scales, cfg.crop)
            if sample is not None:
                batch.append((sid, sample))
        if not batch:
            continue
        maps, cache = tinydet.forward(np.stack([s.image for _, s in batch]), state.params)
        grad_fused = np.zeros_like(maps.fused)
        _, _, r, cc = maps.fused.shape
        for b, (sid, sample) in enumerate(batch):
            rows = anchor_view(maps.fused[b])
            il = image_loss(rows, anchor_boxes, anchor_rows, r, sample.boxes, cfg)
            if not np.isfinite(il.total):
                raise NumericFailure(f"non-finite loss at epoch {epoch}, scene {sid}")
            grad_fused[b] = map_view(il.grad, r, cc) / len(batch)
            sums += (il.cls, il.reg.reg_total, il.reg.lxy_sum, il.reg.lw_sum, il.reg.lh_sum)
            n_img += 1
            state.loss_log.append((epoch, sid, il.reg.lxy_sum, il.reg.lw_sum, il.reg.lh_sum, il.cls))
            # record this epoch's positive predictions for the pseudo-box update
            per_gt = candidates.setdefault(sid, {int(g): [] for g in sample.gt_index})
            pos = np.flatnonzero(il.labels.positive)
            if len(pos):
                pred = sample.to_scene(decode_array(anchor_boxes[pos], rows[pos, 1:]))
                score = losses.sigmoid(rows[pos, 0])
                for a, box, sco in zip(il.labels.labels[pos], pred, score):
                    per_gt[int(sample.gt_index[a])].append((Box(*box), float(sco)))
        grads = tinydet.backward(grad_fused, cache, state.params)
        clip_gradients(grads, cfg.clip_norm)
        state.optimizer.step(state.params, grads)
        if not all(np.all(np.isfinite(p)) for p in state.params.values()):
            raise NumericFailure(f"non-finite parameters at epoch {epoch}")

    for sid, g_list in state.pseudo.items():
        seen = candidates.get(sid, {})
        for gi, g in enumerate(g_list):
            if cfg.flags["update_pseudo"] and gi in seen:
                pseudogt.update(g, seen[gi], epoch + 1)
            else:
                if gi in seen and not seen[gi]:
                    g.active = False
                g.history.append((epoch + 1, g.box.w, g.box.h))

    means = sums / max(n_img, 1)
    return {"cls": means[0], "reg": means[1], "lxy": means[2], "lw": means[3], "lh": means[4],
            "n_images": n_img, "active_folds": "".join(str(f) for f in sorted(live))}


# -- prediction -------------------------------------------------------------

def predict(params: dict, image: np.ndarray, specs: Sequence[anc.AnchorSpec],
            protocol: EvalProtocol = EvalProtocol(), scales: Sequence[float] = (0.5, 1.0, 1.5, 2.0),
            score_floor: float | None = None, pooled_nms: bool = True,
            max_per_scale: int = 2000) -> tuple[np.ndarray, np.ndarray]:
    """Multi-scale detection: boxes (scene pixels) and scores after NMS.

    Detections below ``score_floor`` (default: the protocol's confidence) are
    dropped.  With ``pooled_nms`` the scales are pooled before one NMS pass;
    otherwise each scale is suppressed separately and the survivors pooled.
    """
    floor = protocol.confidence if score_floor is None else score_floor
    h, w = image.shape
    all_boxes, all_scores = [], []
    for s in scales:
        img = rescale(image, s)
        ph, pw = padded_size(img.shape[0]), padded_size(img.shape[1])
        padded = np.zeros((ph, pw))
        padded[:img.shape[0], :img.shape[1]] = img
        maps, _ = tinydet.forward(padded, params)
        rows = anchor_view(maps.fused[0])
        grid = anc.build_grid(pw, ph, 1, specs)
        scores = losses.sigmoid(rows[:, 0])
        keep = np.flatnonzero(scores >= floor)
        if len(keep) > max_per_scale:
            keep = keep[np.argsort(-scores[keep], kind="stable")[:max_per_scale]]
        boxes = decode_array(grid.boxes()[keep], rows[keep, 1:]) / s
        sc = scores[keep]
        if not pooled_nms and len(sc):
            k = nms(boxes, sc, protocol.nms_iou)
            boxes, sc = boxes[k], sc[k]
        all_boxes.append(boxes)
        all_scores.append(sc)
    boxes = np.concatenate(all_boxes) if all_boxes else np.zeros((0, 4))
    scores = np.concatenate(all_scores) if all_scores else np.zeros(0)
    if len(scores) == 0:
        return boxes.reshape(0, 4), scores
    k = nms(boxes, scores, protocol.nms_iou)
    return boxes[k], scores[k]


def count(params, image, specs, protocol=EvalProtocol(), scales=(0.5, 1.0, 1.5, 2.0)) -> int:
    boxes, _ = predict(params, image, specs, protocol, scales)
    return len(boxes)


# -- full run ---------------------------------------------------------------

@dataclass
class TrainResult:
    best_params: dict
    final_params: dict
    best_epoch: int
    state: TrainState
    history: list

    @property
    def specs(self):
        return self.state.specs


def validate(params, specs, val: Sequence[TrainScene], cfg: TrainConfig,
             protocol: EvalProtocol = EvalProtocol()) -> tuple[float, float]:
    est = [count(params, s.image, specs, protocol, cfg.test_scales) for s in val]
    return mae_mse(est, [len(s.points) for s in val])


def run(cfg: TrainConfig, scenes: Sequence[TrainScene],
        on_epoch: Callable[[EpochStats], None] | None = None) -> TrainResult:
    """Train on the 80% split, pick the epoch with the lowest validation MAE."""
    train, val = split_train_val(scenes)
    state = prepare(train, cfg)
    by_id = {s.id: s for s in train}
    best = (np.inf, -1, None)
    for epoch in range(cfg.epochs):
        state.epoch = epoch
        stats = train_epoch(state, by_id)
        if val and (epoch % cfg.val_every == 0 or epoch == cfg.epochs - 1):
            vmae, vmse = validate(state.params, state.specs, val, cfg)
        else:
            vmae, vmse = float("nan"), float("nan")
        sides = [min(g.box.w, g.box.h) for gl in state.pseudo.values() for g in gl]
        row = EpochStats(epoch, cfg.variant, stats["cls"], stats["reg"], stats["lxy"],
                         stats["lw"], stats["lh"], vmae, vmse, stats["active_folds"],
                         stats["n_images"], float(np.median(sides)))
        state.history.append(row)
        log.info("epoch %d %s cls=%.4f reg=%.4f val_mae=%.2f folds=%s", epoch, cfg.variant,
                 row.cls, row.reg, vmae, row.active_folds)
        if on_epoch:
            on_epoch(row)
        if np.isfinite(vmae) and vmae < best[0]:
            best = (vmae, epoch, copy.deepcopy(state.params))
    if best[2] is None:
        best = (np.nan, cfg.epochs - 1, copy.deepcopy(state.params))
    return TrainResult(best[2], state.params, best[1], state, state.history)
