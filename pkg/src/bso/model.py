"""Encoder-decoder with global (dot-product) attention and input feeding.

The model exposes two scoring heads over the same parameters:

* ``score_g``: log-probabilities (affine + log-softmax), used for
  cross-entropy pretraining and the locally-normalized baseline;
* ``score_f``: the same affine output without normalization, used as the
  sequence scorer during beam-search training and decoding.

All forward functions keep caches so the matching hand-derived backward
passes can be replayed later; beam search keeps many states alive per
time-step, so caches are plain read-only structures that can be revisited.
States and caches are batched along the first axis and individual rows can
be sliced out for per-hypothesis backward work.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .nn import DimensionError, ParamSlot

ATTN_NEG = -1e9


class InputError(ValueError):
    """Bad model input (out-of-vocabulary ids, empty sequences)."""


@dataclass
class ModelConfig:
    src_vocab: int
    tgt_vocab: int
    d_emb: int = 64
    d_h: int = 64
    layers: int = 1
    dropout: float = 0.0
    attention: str = "dot"

    def to_dict(self):
        return {"src_vocab": self.src_vocab, "tgt_vocab": self.tgt_vocab,
                "d_emb": self.d_emb, "d_h": self.d_h, "layers": self.layers,
                "dropout": self.dropout, "attention": self.attention}


@dataclass
class DecoderState:
    """Per-hypothesis recurrent state: (h, c) per layer plus input feed."""

    h: list
    c: list
    input_feed: np.ndarray

    @property
    def batch(self):
        return self.input_feed.shape[0]

    def select(self, indices):
        """Gather rows; fancy indexing copies, so the result is isolated."""
        idx = np.asarray(indices)
        if idx.size and (idx.min() < 0 or idx.max() >= self.batch):
            raise IndexError("state row index out of range")
        return DecoderState([h[idx] for h in self.h], [c[idx] for c in self.c],
                            self.input_feed[idx])


def select_states(states, indices):
    """Permute/duplicate a list of single-row DecoderStates."""
    out = []
    for i in indices:
        if not 0 <= i < len(states):
            raise IndexError("state index out of range")
        s = states[i]
        out.append(DecoderState([h.copy() for h in s.h], [c.copy() for c in s.c],
                                s.input_feed.copy()))
    return out


@dataclass
class StateGrad:
    """Gradient w.r.t. a DecoderState (one BRNN stream)."""

    h: list
    c: list
    input_feed: np.ndarray

    @classmethod
    def zeros(cls, layers, batch, d_h, dtype):
        return cls([np.zeros((batch, d_h), dtype=dtype) for _ in range(layers)],
                   [np.zeros((batch, d_h), dtype=dtype) for _ in range(layers)],
                   np.zeros((batch, d_h), dtype=dtype))

    def add_(self, other):
        for a, b in zip(self.h, other.h):
            a += b
        for a, b in zip(self.c, other.c):
            a += b
        self.input_feed += other.input_feed
        return self


@dataclass
class EncodedSource:
    annotations: np.ndarray          # [B, S, H]
    init_state: DecoderState
    lengths: np.ndarray              # [B]
    attn_bias: np.ndarray | None     # [B, S], 0 for real tokens, ATTN_NEG for pad
    cache: object = None

    @property
    def batch(self):
        return self.annotations.shape[0]


@dataclass
class StepOutput:
    state: DecoderState
    attn_weights: np.ndarray         # [B, S]
    attn_hidden: np.ndarray          # [B, H]


class MaskSet:
    """Pre-computed dropout masks, keyed by (time_step, layer boundary).

    The same mask is shared by every hypothesis alive at a given step and is
    reused verbatim in the backward pass.
    """

    def __init__(self, masks):
        self._by_key = {(m.time_step, m.layer): m.mask for m in masks}

    @classmethod
    def build(cls, rate, layers, steps, rng, d_h, dtype=np.float32):
        boundaries = max(layers - 1, 0)
        return cls(nn.make_dropout_masks(rate, boundaries, steps, rng, d_h, dtype=dtype))

    def get(self, step, layer):
        try:
            return self._by_key[(step, layer)]
        except KeyError:
            raise LookupError(f"no dropout mask for step {step}, layer {layer}") from None


def _softmax(x):
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=-1, keepdims=True)


class Seq2SeqModel:
    """Attention encoder-decoder over a flat set of named ParamSlots."""

    ENCODER_GROUP = ("src_embed", "tgt_embed", "enc", "dec", "attn")

    def __init__(self, config, rng=None, dtype=np.float32, init=True):
        self.config = config
        self.dtype = dtype
        self.params = {}
        rng = rng if rng is not None else np.random.default_rng(0)
        cfg = config
        if init:
            def mk(name, shape):
                self.params[name] = ParamSlot.create(name, shape, rng, dtype=dtype)
            mk("src_embed", (cfg.src_vocab, cfg.d_emb))
            mk("tgt_embed", (cfg.tgt_vocab, cfg.d_emb))
            for l in range(cfg.layers):
                enc_in = cfg.d_emb if l == 0 else cfg.d_h
                dec_in = cfg.d_emb + cfg.d_h if l == 0 else cfg.d_h
                mk(f"enc{l}.wx", (enc_in, 4 * cfg.d_h))
                mk(f"enc{l}.wh", (cfg.d_h, 4 * cfg.d_h))
                mk(f"enc{l}.b", (4 * cfg.d_h,))
                mk(f"dec{l}.wx", (dec_in, 4 * cfg.d_h))
                mk(f"dec{l}.wh", (cfg.d_h, 4 * cfg.d_h))
                mk(f"dec{l}.b", (4 * cfg.d_h,))
            mk("attn.w", (2 * cfg.d_h, cfg.d_h))
            mk("attn.b", (cfg.d_h,))
            mk("out.w", (cfg.d_h, cfg.tgt_vocab))
            mk("out.b", (cfg.tgt_vocab,))

    # -- parameter plumbing -------------------------------------------------

    def slots(self):
        return list(self.params.values())

    def zero_grads(self):
        for s in self.params.values():
            s.zero_grad()

    def lr_group(self, name):
        """'output' for the final word-prediction layer, 'main' otherwise."""
        return "output" if name.startswith("out.") else "main"

    def astype(self, dtype):
        """Copy of the model with parameters cast to dtype (for grad checks)."""
        other = Seq2SeqModel(self.config, dtype=dtype, init=False)
        for name, slot in self.params.items():
            other.params[name] = ParamSlot(name, slot.value.astype(dtype))
        return other

    # -- encoder ------------------------------------------------------------

    def encode(self, src, lengths=None, masks=None):
        """Run the encoder over a [B, S] batch of source token ids."""
        src = np.asarray(src)
        if src.ndim == 1:
            src = src[None, :]
        B, S = src.shape
        if S == 0:
            raise InputError("empty source sequence")
        if src.min() < 0 or src.max() >= self.config.src_vocab:
            raise InputError("source token id out of vocabulary range")
        if lengths is None:
            lengths = np.full(B, S, dtype=np.int64)
        lengths = np.asarray(lengths)
        cfg = self.config
        emb = self.params["src_embed"].value[src]           # [B, S, E]
        h = [np.zeros((B, cfg.d_h), dtype=self.dtype) for _ in range(cfg.layers)]
        c = [np.zeros((B, cfg.d_h), dtype=self.dtype) for _ in range(cfg.layers)]
        final_h = [np.zeros_like(h[0]) for _ in range(cfg.layers)]
        final_c = [np.zeros_like(c[0]) for _ in range(cfg.layers)]
        annotations = np.zeros((B, S, cfg.d_h), dtype=self.dtype)
        step_caches = []
        for t in range(S):
            x = emb[:, t]
            layer_caches = []
            for l in range(cfg.layers):
                p = self.params
                h[l], c[l], cache = nn.lstm_cell_forward(
                    x, h[l], c[l], p[f"enc{l}.wx"].value, p[f"enc{l}.wh"].value,
                    p[f"enc{l}.b"].value)
                layer_caches.append(cache)
                if l < cfg.layers - 1:
                    m = masks.get(t, l).astype(self.dtype) if masks is not None else None
                    x = h[l] * m if m is not None else h[l]
                    layer_caches[-1]["drop_mask"] = m
            annotations[:, t] = h[-1]
            at_end = lengths - 1 == t
            if at_end.any():
                for l in range(cfg.layers):
                    final_h[l][at_end] = h[l][at_end]
                    final_c[l][at_end] = c[l][at_end]
            step_caches.append(layer_caches)
        attn_bias = None
        if (lengths < S).any():
            attn_bias = np.where(np.arange(S)[None, :] < lengths[:, None],
                                 0.0, ATTN_NEG).astype(self.dtype)
        init_state = DecoderState([a.copy() for a in final_h],
                                  [a.copy() for a in final_c],
                                  np.zeros((B, cfg.d_h), dtype=self.dtype))
        cache = {"src": src, "lengths": lengths, "steps": step_caches}
        return EncodedSource(annotations, init_state, lengths, attn_bias, cache)

    def encode_backward(self, enc, d_annotations, d_init):
        """Backprop through encode; accumulates into parameter grads.

        d_init is a StateGrad for the decoder init state (its input_feed
        component is ignored: the initial feed is a constant zero).
        """
        cfg = self.config
        cache = enc.cache
        src, lengths = cache["src"], cache["lengths"]
        B, S = src.shape
        dh = [np.zeros((B, cfg.d_h), dtype=d_annotations.dtype) for _ in range(cfg.layers)]
        dc = [np.zeros_like(dh[0]) for _ in range(cfg.layers)]
        p = self.params
        for t in range(S - 1, -1, -1):
            at_end = lengths - 1 == t
            if at_end.any():
                for l in range(cfg.layers):
                    dh[l][at_end] += d_init.h[l][at_end]
                    dc[l][at_end] += d_init.c[l][at_end]
            dh[-1] += d_annotations[:, t]
            dx_down = None
            for l in range(cfg.layers - 1, -1, -1):
                cur_dh = dh[l]
                if dx_down is not None:
                    m = cache["steps"][t][l].get("drop_mask")
                    cur_dh = cur_dh + (dx_down * m if m is not None else dx_down)
                dx, dh[l], dc[l] = nn.lstm_cell_backward(
                    cache["steps"][t][l], cur_dh, dc[l],
                    p[f"enc{l}.wx"].value, p[f"enc{l}.wh"].value,
                    p[f"enc{l}.wx"].grad, p[f"enc{l}.wh"].grad, p[f"enc{l}.b"].grad)
                dx_down = dx
            np.add.at(p["src_embed"].grad, src[:, t], dx_down)

    # -- decoder ------------------------------------------------------------

    def init_state(self, enc):
        s = enc.init_state
        return DecoderState([h.copy() for h in s.h], [c.copy() for c in s.c],
                            s.input_feed.copy())

    def decode_step(self, state, words, enc, step=0, masks=None):
        """Advance one decoder step for a batch of hypotheses.

        ``words`` are the tokens being consumed (the previous outputs); the
        returned StepOutput scores candidates for the next position via
        score_f/score_g. Returns (StepOutput, cache).
        """
        words = np.atleast_1d(np.asarray(words))
        if words.min() < 0 or words.max() >= self.config.tgt_vocab:
            raise InputError("target token id out of vocabulary range")
        cfg = self.config
        B = state.batch
        p = self.params
        emb = p["tgt_embed"].value[words]                  # [B, E]
        x = np.concatenate([emb, state.input_feed], axis=1)
        new_h, new_c, layer_caches = [], [], []
        for l in range(cfg.layers):
            hl, cl, cache = nn.lstm_cell_forward(
                x, state.h[l], state.c[l], p[f"dec{l}.wx"].value,
                p[f"dec{l}.wh"].value, p[f"dec{l}.b"].value)
            new_h.append(hl)
            new_c.append(cl)
            layer_caches.append(cache)
            if l < cfg.layers - 1:
                m = masks.get(step, l).astype(self.dtype) if masks is not None else None
                x = hl * m if m is not None else hl
                layer_caches[-1]["drop_mask"] = m
        top = new_h[-1]                                     # [B, H]
        ann = enc.annotations
        if enc.batch == B:
            scores = np.einsum("bsh,bh->bs", ann, top)
            bias = enc.attn_bias
        elif enc.batch == 1:
            scores = top @ ann[0].T
            bias = None if enc.attn_bias is None else enc.attn_bias[0:1]
        else:
            raise DimensionError("state batch incompatible with encoded source batch")
        if bias is not None:
            scores = scores + bias
        attn = _softmax(scores)                             # [B, S]
        if enc.batch == B:
            context = np.einsum("bs,bsh->bh", attn, ann)
        else:
            context = attn @ ann[0]
        attn_in = np.concatenate([context, top], axis=1)
        attn_hidden = np.tanh(nn.affine_forward(attn_in, p["attn.w"].value, p["attn.b"].value))
        out_state = DecoderState(new_h, new_c, attn_hidden)
        cache = {"words": words, "layers": layer_caches, "top": top,
                 "attn": attn, "attn_in": attn_in, "attn_hidden": attn_hidden,
                 "enc": enc, "step": step}
        return StepOutput(out_state, attn, attn_hidden), cache

    def score_f(self, out):
        """Unnormalized next-token scores [B, V]."""
        p = self.params
        return nn.affine_forward(out.attn_hidden, p["out.w"].value, p["out.b"].value)

    def score_g(self, out):
        """Log-probabilities [B, V]: log-softmax over score_f."""
        return nn.log_softmax(self.score_f(out))

    def decode_step_backward(self, cache, d_state, d_f=None, rows=None,
                             d_annotations=None, masks=None):
        """Backprop one decoder step (optionally a row slice of its batch).

        d_state is the StateGrad w.r.t. the step's output state; d_f, if
        given, is the gradient w.r.t. score_f for those rows. Parameter
        grads accumulate in place; annotation grads accumulate into
        d_annotations (shape [enc_batch, S, H]). Returns the StateGrad
        w.r.t. the input state.
        """
        if rows is None:
            rows = slice(None)
        cfg = self.config
        p = self.params
        enc = cache["enc"]
        ah = cache["attn_hidden"][rows]
        d_ah = d_state.input_feed.copy()
        if d_f is not None:
            d_ah += nn.affine_backward(ah, p["out.w"].value, d_f,
                                       p["out.w"].grad, p["out.b"].grad)
        d_pre = d_ah * (1.0 - ah * ah)
        d_attn_in = nn.affine_backward(cache["attn_in"][rows], p["attn.w"].value,
                                       d_pre, p["attn.w"].grad, p["attn.b"].grad)
        H = cfg.d_h
        d_context = d_attn_in[:, :H]
        d_top = d_attn_in[:, H:].copy()
        attn = cache["attn"][rows]
        top = cache["top"][rows]
        if enc.batch == 1:
            ann_r = np.broadcast_to(enc.annotations[0],
                                    (attn.shape[0],) + enc.annotations.shape[1:])
        else:
            ann_r = enc.annotations[rows]
        d_attn = np.einsum("bh,bsh->bs", d_context, ann_r)
        d_ann_rows = attn[:, :, None] * d_context[:, None, :]
        d_scores = attn * (d_attn - (attn * d_attn).sum(axis=-1, keepdims=True))
        d_top += np.einsum("bs,bsh->bh", d_scores, ann_r)
        d_ann_rows += d_scores[:, :, None] * top[:, None, :]
        if d_annotations is not None:
            if enc.batch == 1:
                d_annotations[0] += d_ann_rows.sum(axis=0)
            else:
                d_annotations[rows] += d_ann_rows
        # recurrent layers, top down
        dh_prev = [None] * cfg.layers
        dc_prev = [None] * cfg.layers
        dx_down = None
        step = cache["step"]
        for l in range(cfg.layers - 1, -1, -1):
            cur_dh = d_state.h[l].copy()
            if l == cfg.layers - 1:
                cur_dh += d_top
            if dx_down is not None:
                m = cache["layers"][l].get("drop_mask")
                cur_dh += dx_down * m if m is not None else dx_down
            dx, dhp, dcp = nn.lstm_cell_backward(
                cache["layers"][l], cur_dh, d_state.c[l],
                p[f"dec{l}.wx"].value, p[f"dec{l}.wh"].value,
                p[f"dec{l}.wx"].grad, p[f"dec{l}.wh"].grad, p[f"dec{l}.b"].grad,
                rows=rows)
            dh_prev[l] = dhp
            dc_prev[l] = dcp
            dx_down = dx
        E = cfg.d_emb
        d_emb = dx_down[:, :E]
        d_feed_prev = dx_down[:, E:]
        np.add.at(p["tgt_embed"].grad, cache["words"][rows], d_emb)
        return StateGrad(dh_prev, dc_prev, d_feed_prev)

    def state_grad_zeros(self, batch, dtype=None):
        return StateGrad.zeros(self.config.layers, batch, self.config.d_h,
                               dtype or self.dtype)

    # -- checkpointing ------------------------------------------------------

    def save(self, path, extra=None):
        tensors = {}
        for name, slot in self.params.items():
            tensors[name] = slot.value
            tensors[name + ".accum"] = slot.adagrad_accum
        header = {"config": self.config.to_dict(), "extra": extra or {}}
        cfg_bytes = json.dumps(header).encode("utf-8")
        with open(path, "wb") as fh:
            fh.write(b"BSOC")
            fh.write(struct.pack("<I", len(cfg_bytes)))
            fh.write(cfg_bytes)
            nn.write_fragment(fh, tensors)

    @classmethod
    def load(cls, path, dtype=np.float32, with_extra=False):
        with open(path, "rb") as fh:
            magic = fh.read(4)
            if magic != b"BSOC":
                raise ValueError(f"bad model checkpoint magic {magic!r}")
            (clen,) = struct.unpack("<I", fh.read(4))
            header = json.loads(fh.read(clen).decode("utf-8"))
            cfg = ModelConfig(**header["config"])
            tensors = nn.read_fragment(fh)
        model = cls(cfg, dtype=dtype, init=False)
        for name, arr in tensors.items():
            if name.endswith(".accum"):
                continue
            slot = ParamSlot(name, arr.astype(dtype))
            accum = tensors.get(name + ".accum")
            if accum is not None:
                slot.adagrad_accum = accum.astype(dtype)
            model.params[name] = slot
        if with_extra:
            return model, header.get("extra", {})
        return model
