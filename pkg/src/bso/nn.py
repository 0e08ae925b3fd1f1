"""Differentiable numerical primitives with hand-derived backward passes.

Everything here works on plain numpy arrays. The batch dimension is always
first; a "row" of a batched cache can be sliced out with ``arr[r:r+1]`` and
pushed through the same backward code. Parameters default to float32;
float64 is supported throughout so gradient checks can run at full
precision.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

ADAGRAD_EPS = 1e-10
INIT_SCALE = 0.1
MAGIC = b"BSO1"


class DimensionError(ValueError):
    """Shapes passed to a primitive do not match its parameters."""


def assert_finite(x, what="tensor"):
    if not np.all(np.isfinite(x)):
        raise FloatingPointError(f"non-finite values in {what}")


@dataclass
class ParamSlot:
    """One named parameter with its gradient and Adagrad accumulator."""

    name: str
    value: np.ndarray
    grad: np.ndarray = None
    adagrad_accum: np.ndarray = None

    def __post_init__(self):
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        if self.adagrad_accum is None:
            self.adagrad_accum = np.zeros_like(self.value)
        if self.grad.shape != self.value.shape or self.adagrad_accum.shape != self.value.shape:
            raise DimensionError(f"slot {self.name}: value/grad/accum shapes differ")

    @classmethod
    def create(cls, name, shape, rng, dtype=np.float32, scale=INIT_SCALE):
        value = rng.uniform(-scale, scale, size=shape).astype(dtype)
        return cls(name, value)

    def zero_grad(self):
        self.grad[...] = 0


def sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# ---------------------------------------------------------------------------
# LSTM cell. Gate layout along the last axis of the 4H pre-activation:
# [input, forget, candidate, output].


def lstm_cell_forward(x, h_prev, c_prev, w_x, w_h, b):
    """One LSTM step over a batch of rows.

    x: [B, d_in], h_prev/c_prev: [B, H]; w_x: [d_in, 4H], w_h: [H, 4H],
    b: [4H]. Returns (h, c, cache).
    """
    H = h_prev.shape[1]
    if w_x.shape != (x.shape[1], 4 * H) or w_h.shape != (H, 4 * H) or b.shape != (4 * H,):
        raise DimensionError(
            f"lstm shapes: x{x.shape} h{h_prev.shape} wx{w_x.shape} wh{w_h.shape} b{b.shape}")
    pre = x @ w_x + h_prev @ w_h + b
    i = sigmoid(pre[:, :H])
    f = sigmoid(pre[:, H:2 * H])
    g = np.tanh(pre[:, 2 * H:3 * H])
    o = sigmoid(pre[:, 3 * H:])
    c = f * c_prev + i * g
    tc = np.tanh(c)
    h = o * tc
    cache = {"x": x, "h_prev": h_prev, "c_prev": c_prev,
             "i": i, "f": f, "g": g, "o": o, "tc": tc}
    return h, c, cache


def lstm_cell_backward(cache, dh, dc, w_x, w_h, gw_x, gw_h, gb, rows=None):
    """Backward of :func:`lstm_cell_forward`; adds into gw_x/gw_h/gb.

    ``rows`` restricts the pass to a slice of the cached batch (the cache
    rows and dh/dc must agree).
    """
    if rows is None:
        rows = slice(None)
    x = cache["x"][rows]
    h_prev = cache["h_prev"][rows]
    c_prev = cache["c_prev"][rows]
    i, f, g, o, tc = (cache[k][rows] for k in ("i", "f", "g", "o", "tc"))

    do = dh * tc
    dc_full = dc + dh * o * (1.0 - tc * tc)
    di = dc_full * g
    dg = dc_full * i
    df = dc_full * c_prev
    dc_prev = dc_full * f

    dpre = np.concatenate(
        [di * i * (1.0 - i),
         df * f * (1.0 - f),
         dg * (1.0 - g * g),
         do * o * (1.0 - o)], axis=1)
    gw_x += x.T @ dpre
    gw_h += h_prev.T @ dpre
    gb += dpre.sum(axis=0)
    dx = dpre @ w_x.T
    dh_prev = dpre @ w_h.T
    return dx, dh_prev, dc_prev


# ---------------------------------------------------------------------------
# Affine layer.


def affine_forward(x, w, b):
    """out = x @ w + b, x: [B, d_in], w: [d_in, d_out]."""
    if w.shape[0] != x.shape[1] or b.shape != (w.shape[1],):
        raise DimensionError(f"affine shapes: x{x.shape} w{w.shape} b{b.shape}")
    return x @ w + b


def affine_backward(x, w, d_out, gw, gb):
    """Backward of affine_forward; adds into gw/gb, returns dx."""
    gw += x.T @ d_out
    gb += d_out.sum(axis=0)
    return d_out @ w.T


# ---------------------------------------------------------------------------
# Log-softmax (max-subtracted, rows).


def log_softmax(scores):
    assert_finite(scores, "log_softmax input")
    m = scores.max(axis=-1, keepdims=True)
    shifted = scores - m
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    return shifted - lse


def log_softmax_backward(logp, d_logp):
    """d_scores given logp = log_softmax(scores) and upstream d_logp."""
    p = np.exp(logp)
    return d_logp - p * d_logp.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# Optimizer and gradient utilities.


def global_grad_norm(slots):
    total = 0.0
    for s in slots:
        g = s.grad.astype(np.float64, copy=False)
        total += float(np.dot(g.ravel(), g.ravel()))
    return float(np.sqrt(total))


def clip_global_norm(slots, max_norm=5.0):
    """Scale all grads so the global L2 norm does not exceed max_norm."""
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    norm = global_grad_norm(slots)
    if norm > max_norm:
        scale = max_norm / norm
        for s in slots:
            s.grad *= np.asarray(scale, dtype=s.grad.dtype)
    return norm


def adagrad_step(slot, lr):
    """Adagrad update; zeroes the grad afterwards."""
    g = slot.grad
    slot.adagrad_accum += g * g
    slot.value -= (lr * g / (np.sqrt(slot.adagrad_accum) + ADAGRAD_EPS)).astype(slot.value.dtype)
    slot.zero_grad()


# ---------------------------------------------------------------------------
# Dropout.


@dataclass
class DropoutMask:
    time_step: int
    layer: int
    mask: np.ndarray


def make_dropout_masks(rate, layers, steps, rng, size, dtype=np.float32):
    """Inverted-dropout masks, one per (layer boundary, time-step).

    The same per-step mask gets reused by every partial hypothesis alive at
    that step, and again in the backward pass.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError("dropout rate must be in [0, 1)")
    masks = []
    keep = 1.0 - rate
    for t in range(steps):
        for l in range(layers):
            if rate == 0.0:
                m = np.ones(size, dtype=dtype)
            else:
                m = (rng.random(size) < keep).astype(dtype) / dtype(keep)
            masks.append(DropoutMask(time_step=t, layer=l, mask=m))
    return masks


# ---------------------------------------------------------------------------
# Checkpoint fragment format: MAGIC, then per tensor
#   u32 name length, name bytes (utf-8), u32 ndim, u32 dims..., f32 data (LE).


def write_fragment(fh, tensors):
    fh.write(MAGIC)
    fh.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        data = np.ascontiguousarray(arr, dtype="<f4")
        nb = name.encode("utf-8")
        fh.write(struct.pack("<I", len(nb)))
        fh.write(nb)
        fh.write(struct.pack("<I", data.ndim))
        fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
        fh.write(data.tobytes())


def read_fragment(fh):
    magic = fh.read(4)
    if magic != MAGIC:
        raise ValueError(f"bad checkpoint magic {magic!r}")
    (count,) = struct.unpack("<I", fh.read(4))
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", fh.read(4))
        name = fh.read(nlen).decode("utf-8")
        (ndim,) = struct.unpack("<I", fh.read(4))
        shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
        n = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(fh.read(4 * n), dtype="<f4").reshape(shape)
        tensors[name] = data.copy()
    return tensors
