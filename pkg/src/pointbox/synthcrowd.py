"""Synthetic perspective crowd scenes.

Heads are bright radial blobs whose side grows linearly with the image row,
``s(y) = s0 + slope * y``, so heads shrink toward the top of the frame.  Head
density is biased toward the top rows, giving a dense far field and a sparse
near field.  Each scene carries point annotations (the only training signal)
and the true boxes, which only evaluation code may read.

On disk a scene is ``<id>.pgm`` (binary P5, maxval 255) plus ``<id>.json``.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .errors import FormatError, SceneIOError, SpecInfeasible

MAX_ATTEMPTS = 100_000


@dataclass(frozen=True)
class SceneSpec:
    width: int = 256
    height: int = 256
    s0: float = 6.0
    slope: float = 0.07
    n_min: int = 50
    n_max: int = 100
    noise: float = 0.04
    # density over rows is proportional to (1 - y/H) ** density_power
    density_power: float = 5.0
    background: float = 0.1
    seed: int = 0

    def side(self, y):
        return self.s0 + self.slope * np.asarray(y, dtype=np.float64)

    def validate(self) -> None:
        if self.width <= 0 or self.height <= 0:
            raise SpecInfeasible("image size must be positive")
        if self.s0 < 2:
            raise SpecInfeasible(f"s0 must be >= 2, got {self.s0}")
        if self.slope < 0:
            raise SpecInfeasible(f"slope must be >= 0, got {self.slope}")
        if self.n_min < 2 or self.n_max < self.n_min:
            raise SpecInfeasible(f"need 2 <= n_min <= n_max, got [{self.n_min}, {self.n_max}]")
        lo, hi = self.row_range()
        if hi <= lo:
            raise SpecInfeasible("heads do not fit inside the image")

    def row_range(self) -> tuple[float, float]:
        """Rows where a head of side s(y) fits vertically inside the image."""
        lo = self.s0 / (2.0 - self.slope) if self.slope < 2 else np.inf
        hi = (self.height - self.s0 / 2.0) / (1.0 + self.slope / 2.0)
        return float(lo), float(hi)

    @classmethod
    def from_dict(cls, data: dict) -> "SceneSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise FormatError(f"unknown scene spec keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class Scene:
    id: str
    image: np.ndarray          # (H, W) float in [0, 1], multiples of 1/255
    points: np.ndarray         # (n, 2) head centers
    true_boxes: np.ndarray     # (n, 4) cx, cy, w, h

    def __post_init__(self):
        if len(self.points) != len(self.true_boxes):
            raise FormatError(
                f"scene {self.id}: {len(self.points)} points but {len(self.true_boxes)} true boxes")

    def points_view(self) -> "TrainScene":
        return TrainScene(self.id, self.image, self.points.copy())


@dataclass
class TrainScene:
    """What training code is allowed to see: image and head points only."""
    id: str
    image: np.ndarray
    points: np.ndarray


def scene_id(index: int) -> str:
    return f"scene_{index:05d}"


def _sample_heads(spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    n = int(rng.integers(spec.n_min, spec.n_max + 1))
    lo, hi = spec.row_range()
    pts = np.empty((n, 2))
    sides = np.empty(n)
    placed = 0
    for _ in range(MAX_ATTEMPTS):
        if placed == n:
            break
        u = rng.random()
        y = lo + (hi - lo) * (1.0 - (1.0 - u) ** (1.0 / (spec.density_power + 1.0)))
        s = float(spec.side(y))
        x = rng.uniform(s / 2, spec.width - s / 2)
        if placed:
            d = np.hypot(pts[:placed, 0] - x, pts[:placed, 1] - y)
            if np.any(d < 0.5 * np.maximum(sides[:placed], s)):
                continue
        pts[placed] = (x, y)
        sides[placed] = s
        placed += 1
    if placed < n:
        raise SpecInfeasible(
            f"placed only {placed} of {n} heads in {MAX_ATTEMPTS} attempts")
    return pts


def render(spec: SceneSpec, points: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    h, w = spec.height, spec.width
    img = np.full((h, w), spec.background)
    for x, y in points:
        radius = float(spec.side(y)) / 2
        level = rng.uniform(0.7, 1.0)
        x0, x1 = max(int(np.floor(x - radius)), 0), min(int(np.ceil(x + radius)) + 1, w)
        y0, y1 = max(int(np.floor(y - radius)), 0), min(int(np.ceil(y + radius)) + 1, h)
        yy, xx = np.mgrid[y0:y1, x0:x1]
        rho = np.hypot(xx + 0.5 - x, yy + 0.5 - y) / radius
        blob = level * np.clip((1.0 - rho) / 0.35, 0.0, 1.0)
        np.maximum(img[y0:y1, x0:x1], blob, out=img[y0:y1, x0:x1])
    img += rng.normal(0.0, spec.noise, size=img.shape)
    return np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0


def true_boxes_for(spec: SceneSpec, points: np.ndarray) -> np.ndarray:
    sides = spec.side(points[:, 1])
    half = sides / 2
    # overflow past each image edge; unclipped boxes keep side and center exactly
    hi = np.clip(points + half[:, None] - [spec.width, spec.height], 0, None)
    lo = np.clip(half[:, None] - points, 0, None)
    wh = sides[:, None] - lo - hi
    centers = points + (lo - hi) / 2
    return np.concatenate([centers, wh], axis=1)


def generate_one(spec: SceneSpec, index: int) -> Scene:
    rng = np.random.default_rng([spec.seed, index])
    pts = _sample_heads(spec, rng)
    image = render(spec, pts, rng)
    return Scene(scene_id(index), image, pts, true_boxes_for(spec, pts))


def generate(spec: SceneSpec, n_scenes: int) -> list[Scene]:
    """Generate ``n_scenes`` scenes; scene ``i`` depends only on (seed, i)."""
    spec.validate()
    return [generate_one(spec, i) for i in range(n_scenes)]


# -- file formats -----------------------------------------------------------

def write_pgm(path: Path, image: np.ndarray) -> None:
    data = np.round(np.clip(image, 0, 1) * 255).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_pgm(path: Path) -> np.ndarray:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise SceneIOError(f"cannot read {path}: {exc}") from exc
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise SceneIOError(f"{path}: truncated PGM header at byte {pos}")
        tokens.append(raw[start:pos])
    pos += 1  # single whitespace byte after maxval
    if tokens[0] != b"P5":
        raise FormatError(f"{path}: not a binary PGM", "byte 0")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise FormatError(f"{path}: bad PGM header", f"byte {pos}") from exc
    if maxval != 255:
        raise FormatError(f"{path}: unsupported maxval {maxval}", f"byte {pos}")
    need = w * h
    if len(raw) - pos < need:
        raise SceneIOError(
            f"{path}: truncated image data, expected {need} bytes at offset {pos}, "
            f"found {len(raw) - pos}")
    data = np.frombuffer(raw, dtype=np.uint8, count=need, offset=pos).reshape(h, w)
    return data.astype(np.float64) / 255.0


def save_scene(scene: Scene, directory: str | os.PathLike) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_pgm(d / f"{scene.id}.pgm", scene.image)
    h, w = scene.image.shape
    doc = {
        "id": scene.id,
        "width": w,
        "height": h,
        "points": [[float(x), float(y)] for x, y in scene.points],
        "true_boxes": [[float(v) for v in b] for b in scene.true_boxes],
    }
    (d / f"{scene.id}.json").write_text(json.dumps(doc) + "\n")


def _read_annotation(directory: Path, sid: str) -> dict:
    path = directory / f"{sid}.json"
    try:
        text = path.read_text()
    except OSError as exc:
        raise SceneIOError(f"cannot read {path}: {exc}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: {exc.msg}", f"line {exc.lineno} column {exc.colno}") from exc
    if not isinstance(doc, dict) or "points" not in doc:
        raise FormatError(f"{path}: missing 'points'", "line 1")
    return doc


def _as_array(rows, width: int, path: Path, key: str) -> np.ndarray:
    try:
        arr = np.asarray(rows, dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise FormatError(f"{path}: '{key}' is not numeric", f"key {key}") from exc
    if arr.size == 0:
        return arr.reshape(0, width)
    if arr.ndim != 2 or arr.shape[1] != width:
        raise FormatError(f"{path}: '{key}' rows must have {width} values", f"key {key}")
    return arr


def load_scene(directory: str | os.PathLike, sid: str) -> Scene:
    """Full scene including true boxes. For evaluation code only."""
    d = Path(directory)
    doc = _read_annotation(d, sid)
    path = d / f"{sid}.json"
    if "true_boxes" not in doc:
        raise FormatError(f"{path}: missing 'true_boxes'", "line 1")
    pts = _as_array(doc["points"], 2, path, "points")
    boxes = _as_array(doc["true_boxes"], 4, path, "true_boxes")
    if len(pts) != len(boxes):
        raise FormatError(
            f"{path}: {len(pts)} points but {len(boxes)} true boxes", "key true_boxes")
    image = read_pgm(d / f"{sid}.pgm")
    return Scene(sid, image, pts, boxes)


def load_train_scene(directory: str | os.PathLike, sid: str) -> TrainScene:
    """Points-only loader; never touches the ``true_boxes`` field."""
    d = Path(directory)
    doc = _read_annotation(d, sid)
    pts = _as_array(doc["points"], 2, d / f"{sid}.json", "points")
    image = read_pgm(d / f"{sid}.pgm")
    return TrainScene(sid, image, pts)


def list_scene_ids(directory: str | os.PathLike) -> list[str]:
    d = Path(directory)
    if not d.is_dir():
        raise SceneIOError(f"dataset directory not found: {d}")
    return sorted(p.stem for p in d.glob("*.json")
                  if (d / f"{p.stem}.pgm").exists())


def spec_to_dict(spec: SceneSpec) -> dict:
    return asdict(spec)
