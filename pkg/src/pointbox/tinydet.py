"""A small two-scale convolutional head detector in numpy.

Six 3x3 convolutions (strides 2, 2, 2, 1, 2, 1) give feature maps at output
strides 8 and 16.  A 1x1 detection head on each produces ``T * 5`` channels,
ordered ``[logit, dx, dy, dw, dh]`` per anchor.  The stride-16 prediction is
nearest-neighbour upsampled and added to the stride-8 one.

Tensors are NCHW float64.  Parameters live in a plain ``dict`` of arrays.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, ShapeError

N_ANCHORS = 25
CHANNELS_PER_ANCHOR = 5
HEAD_CHANNELS = N_ANCHORS * CHANNELS_PER_ANCHOR

# name, in, out, stride
BACKBONE = (
    ("conv1", 1, 8, 2),
    ("conv2", 8, 16, 2),
    ("conv3", 16, 32, 2),
    ("conv4", 32, 32, 1),
    ("conv5", 32, 64, 2),
    ("conv6", 64, 64, 1),
)
HEADS = (("head1", 32), ("head2", 64))
LOGIT_BIAS = -1.0   # per head; the fused logit starts at -2
HEAD_INIT_GAIN = 0.1
# fixed input gain so [0, 1] images reach roughly unit-variance activations
INPUT_SCALE = 4.0


def init_params(seed: int = 0, n_anchors: int = N_ANCHORS) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    params = {}
    for name, cin, cout, _ in BACKBONE:
        params[f"{name}.w"] = rng.normal(0.0, np.sqrt(2.0 / (cin * 9)), (cout, cin, 3, 3))
        params[f"{name}.b"] = np.zeros(cout)
    out = n_anchors * CHANNELS_PER_ANCHOR
    for name, cin in HEADS:
        params[f"{name}.w"] = rng.normal(0.0, HEAD_INIT_GAIN * np.sqrt(2.0 / cin), (out, cin))
        b = np.zeros(out)
        b[0::CHANNELS_PER_ANCHOR] = LOGIT_BIAS
        params[f"{name}.b"] = b
    return params


def param_count(params: dict[str, np.ndarray]) -> int:
    return int(sum(p.size for p in params.values()))


# -- primitives -------------------------------------------------------------

def conv3x3_forward(x, w, b, stride):
    n, c, h, wd = x.shape
    ho, wo = (h - 1) // stride + 1, (wd - 1) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = np.empty((n, c, 9, ho, wo))
    for ki in range(3):
        for kj in range(3):
            cols[:, :, ki * 3 + kj] = xp[:, :, ki:ki + stride * ho:stride, kj:kj + stride * wo:stride]
    cols = cols.reshape(n, c * 9, ho * wo)
    out = np.matmul(w.reshape(w.shape[0], -1), cols) + b[None, :, None]
    return out.reshape(n, w.shape[0], ho, wo), (cols, x.shape, stride)


def conv3x3_backward(dout, w, cache):
    cols, xshape, stride = cache
    n, c, h, wd = xshape
    _, o, ho, wo = dout.shape
    d2 = dout.reshape(n, o, ho * wo)
    dw = np.einsum("nop,nkp->ok", d2, cols).reshape(w.shape)
    db = d2.sum(axis=(0, 2))
    dcols = np.matmul(w.reshape(o, -1).T, d2).reshape(n, c, 9, ho, wo)
    dxp = np.zeros((n, c, h + 2, wd + 2))
    for ki in range(3):
        for kj in range(3):
            dxp[:, :, ki:ki + stride * ho:stride, kj:kj + stride * wo:stride] += dcols[:, :, ki * 3 + kj]
    return dxp[:, :, 1:-1, 1:-1], dw, db


def upsample2(x):
    return x.repeat(2, axis=2).repeat(2, axis=3)


def upsample2_backward(g):
    n, c, h, w = g.shape
    return g.reshape(n, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5))


# -- network ----------------------------------------------------------------

@dataclass
class PredMaps:
    pred1: np.ndarray   # (N, 5T, H/8, W/8)
    pred2: np.ndarray   # (N, 5T, H/16, W/16)
    fused: np.ndarray   # (N, 5T, H/8, W/8)


def as_batch(image) -> np.ndarray:
    x = np.asarray(image, dtype=np.float64)
    if x.ndim == 2:
        x = x[None, None]
    elif x.ndim == 3:
        x = x[:, None]
    if x.ndim != 4 or x.shape[1] != 1:
        raise ShapeError(f"expected (H, W), (N, H, W) or (N, 1, H, W), got {x.shape}")
    return x


def forward(image, params: dict[str, np.ndarray]) -> tuple[PredMaps, dict]:
    x = as_batch(image)
    h, w = x.shape[2:]
    if h % 16 or w % 16:
        raise ShapeError(f"image {h}x{w} is not divisible by 16")
    x = x * INPUT_SCALE
    cache = {}
    feats = {}
    for name, _, _, stride in BACKBONE:
        z, cache[name] = conv3x3_forward(x, params[f"{name}.w"], params[f"{name}.b"], stride)
        x = np.maximum(z, 0.0)
        cache[name + ".relu"] = z > 0
        feats[name] = x
    preds = []
    for (name, _), src in zip(HEADS, ("conv4", "conv6")):
        f = feats[src]
        n, c, fh, fw = f.shape
        flat = f.reshape(n, c, fh * fw)
        p = np.matmul(params[f"{name}.w"], flat) + params[f"{name}.b"][None, :, None]
        preds.append(p.reshape(n, -1, fh, fw))
        cache[name] = flat
    pred1, pred2 = preds
    fused = pred1 + upsample2(pred2)
    return PredMaps(pred1, pred2, fused), cache


def backward(grad_fused: np.ndarray, cache: dict, params: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Parameter gradients given d(loss)/d(fused)."""
    grads = {}
    g2 = upsample2_backward(grad_fused)
    head_grads = {}
    for (name, _), g, src in zip(HEADS, (grad_fused, g2), ("conv4", "conv6")):
        flat = cache[name]
        n, c, p = flat.shape
        g_flat = g.reshape(n, g.shape[1], -1)
        grads[f"{name}.w"] = np.einsum("nop,ncp->oc", g_flat, flat)
        grads[f"{name}.b"] = g_flat.sum(axis=(0, 2))
        head_grads[src] = np.matmul(params[f"{name}.w"].T, g_flat)
    dx = None
    for name, _, _, _ in reversed(BACKBONE):
        if name in head_grads:
            hg = head_grads[name].reshape(cache[name + ".relu"].shape)
            dx = hg if dx is None else dx + hg
        dz = dx * cache[name + ".relu"]
        dx, grads[f"{name}.w"], grads[f"{name}.b"] = conv3x3_backward(dz, params[f"{name}.w"], cache[name])
    return {k: grads[k] for k in params}


class SGD:
    """Momentum SGD with L2 weight decay folded into the gradient."""

    def __init__(self, lr=1e-4, momentum=0.9, weight_decay=5e-4):
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, params, grads):
        for k, p in params.items():
            v = self.velocity.get(k)
            if v is None:
                v = self.velocity[k] = np.zeros_like(p)
            sgd_step(p, grads[k], v, self.lr, self.momentum, self.weight_decay)


def sgd_step(param, grad, velocity, lr, momentum, weight_decay):
    """In-place ``v = m v - lr (g + wd p); p += v``."""
    velocity *= momentum
    velocity -= lr * (grad + weight_decay * param)
    param += velocity


# -- checkpoints ------------------------------------------------------------

MAGIC = b"PBOXCKPT"
VERSION = 1


def save_checkpoint(path, params: dict[str, np.ndarray], meta: dict | None = None) -> None:
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(params)))
        fh.write(struct.pack("<I", len(meta_bytes)))
        fh.write(meta_bytes)
        for name, arr in params.items():
            nb = name.encode()
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path, expected: dict[str, np.ndarray] | None = None):
    """Return ``(params, meta)``; shapes are checked against ``expected``."""
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise FormatError(f"{path}: not a checkpoint", "byte 0")
    try:
        version, count = struct.unpack_from("<II", raw, 8)
        if version != VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {version}", "byte 8")
        pos = 16
        (mlen,) = struct.unpack_from("<I", raw, pos)
        meta = json.loads(raw[pos + 4:pos + 4 + mlen])
        pos += 4 + mlen
        params = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", raw, pos)
            name = raw[pos + 4:pos + 4 + nlen].decode()
            pos += 4 + nlen
            (ndim,) = struct.unpack_from("<I", raw, pos)
            shape = struct.unpack_from(f"<{ndim}I", raw, pos + 4)
            pos += 4 + 4 * ndim
            size = int(np.prod(shape)) * 8
            if pos + size > len(raw):
                raise FormatError(f"{path}: truncated tensor {name}", f"byte {pos}")
            params[name] = np.frombuffer(raw, "<f8", int(np.prod(shape)), pos).reshape(shape).copy()
            pos += size
    except struct.error as exc:
        raise FormatError(f"{path}: truncated checkpoint", f"byte {len(raw)}") from exc
    if expected is not None:
        if set(params) != set(expected):
            raise ShapeError(f"{path}: tensor names differ from the model")
        for k, v in expected.items():
            if params[k].shape != v.shape:
                raise ShapeError(f"{path}: {k} has shape {params[k].shape}, model expects {v.shape}")
        params = {k: params[k] for k in expected}
    return params, meta
