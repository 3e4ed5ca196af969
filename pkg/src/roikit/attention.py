"""Caption injection paths and box-embedding guidance.

Three ways to push per-instance conditioning into a spatial feature map:

* the crop path: shared cross-attention applied to ROI-aligned crops,
  refined by per-instance self-attention, then pasted back by unpool
  (assembled in :mod:`roikit.model`);
* the masked baseline: cross-attention over every spatial position, zeroed
  outside a nearest-integer box mask;
* the embedding baseline: gated self-attention with grounding tokens built
  from pooled caption embeddings fused with Fourier box embeddings.

One cross-attention weight set serves both the global-caption path and the
per-instance path; instance conditioning adds no instance-specific
projections.
"""
from __future__ import annotations

from dataclasses import dataclass
import math

import numpy as np

from . import tensor as T
from .precision import dtype
from .roi_ops import RoiBoxBatch, quantized_mask
from .tensor import Tensor

FOURIER_FREQS = 8  # geometric 2^k frequencies per coordinate


@dataclass
class CrossAttnParams:
    """Single-head scaled dot-product attention projections."""
    wq: Tensor  # (c, dk)
    wk: Tensor  # (d, dk)
    wv: Tensor  # (d, dk)
    wo: Tensor  # (dk, c)

    @classmethod
    def init(cls, c: int, d: int, dk: int, rng: np.random.Generator,
             zero_out: bool = False) -> "CrossAttnParams":
        def w(fan_in, shape):
            return T.tensor(rng.standard_normal(shape) / math.sqrt(fan_in),
                            requires_grad=True)
        wo = (T.tensor(np.zeros((dk, c)), requires_grad=True) if zero_out
              else w(dk, (dk, c)))
        return cls(w(c, (c, dk)), w(d, (d, dk)), w(d, (d, dk)), wo)

    def named(self, prefix: str):
        return {f"{prefix}.wq": self.wq, f"{prefix}.wk": self.wk,
                f"{prefix}.wv": self.wv, f"{prefix}.wo": self.wo}


def cross_attention(queries: Tensor, caption: Tensor, p: CrossAttnParams,
                    key_mask: np.ndarray | None = None) -> Tensor:
    """Scaled dot-product attention of (..., N, c) queries over (..., L, d) tokens."""
    if queries.shape[-1] != p.wq.shape[0]:
        raise T.ShapeError(
            f"query width {queries.shape[-1]} != projection input width {p.wq.shape[0]}")
    if caption.shape[-1] != p.wk.shape[0]:
        raise T.ShapeError(
            f"caption width {caption.shape[-1]} != projection input width {p.wk.shape[0]}")
    dk = p.wq.shape[1]
    q = T.matmul(queries, p.wq)
    k = T.matmul(caption, p.wk)
    v = T.matmul(caption, p.wv)
    logits = T.scale(T.matmul(q, T.moveaxis(k, -1, -2)), 1.0 / math.sqrt(dk))
    if key_mask is not None:
        key_mask = np.broadcast_to(key_mask, logits.shape)
    att = T.softmax(logits, axis=-1, mask=key_mask)
    return T.matmul(T.matmul(att, v), p.wo)


@dataclass
class RoiSelfAttnParams:
    attn: CrossAttnParams
    pos: Tensor  # learned (r*r, c) lattice positional encoding

    @classmethod
    def init(cls, c: int, r: int, rng: np.random.Generator) -> "RoiSelfAttnParams":
        pos = T.tensor(rng.standard_normal((r * r, c)) * 0.02, requires_grad=True)
        return cls(CrossAttnParams.init(c, c, c, rng, zero_out=True), pos)

    def named(self, prefix: str):
        out = self.attn.named(f"{prefix}.attn")
        out[f"{prefix}.pos"] = self.pos
        return out


def roi_self_attention(roi: Tensor, p: RoiSelfAttnParams) -> Tensor:
    """Residual self-attention over each instance's r*r tokens, in isolation."""
    b, n, c, r, r2 = roi.shape
    x = T.reshape(T.moveaxis(T.reshape(roi, (b * n, c, r * r2)), 1, 2),
                  (b * n, r * r2, c))
    xt = T.add(x, p.pos)
    out = cross_attention(xt, xt, p.attn)
    y = T.add(x, out)
    return T.reshape(T.moveaxis(y, 1, 2), (b, n, c, r, r2))


def spatial_to_tokens(feature: Tensor) -> Tensor:
    b, c, h, w = feature.shape
    return T.reshape(T.moveaxis(feature, 1, 3), (b, h * w, c))


def tokens_to_spatial(tokens: Tensor, h: int, w: int) -> Tensor:
    b, hw, c = tokens.shape
    return T.moveaxis(T.reshape(tokens, (b, h, w, c)), 3, 1)


def masked_instance_attention(feature: Tensor, captions: Tensor,
                              boxes: RoiBoxBatch, p: CrossAttnParams) -> Tensor:
    """Baseline injection: full-map cross-attention zeroed outside the
    nearest-integer box mask. Cost is Theta(n * h * w * L) by construction."""
    b, c, h, w = feature.shape
    n = boxes.n_slots
    tokens = spatial_to_tokens(feature)                       # (b, hw, c)
    q = T.reshape(tokens, (b, 1, h * w, c))
    out = cross_attention(q, captions, p)                     # (b, n, hw, c)
    mask = quantized_mask(boxes, h, w)                        # (b, n, 1, h, w)
    mask = mask & boxes.valid[:, :, None, None, None]
    gate = mask.reshape(b, n, h * w, 1).astype(out.data.dtype)
    out = T.mul(out, T.tensor(gate))
    return T.moveaxis(T.reshape(out, (b, n, h, w, c)), 4, 2)  # (b, n, c, h, w)


def fourier_box_features(boxes: RoiBoxBatch, freqs: int = FOURIER_FREQS,
                         local_frame: bool = False) -> np.ndarray:
    """Deterministic (b, n, 8*freqs) Fourier features of box corners.

    ``local_frame`` switches to each box's own [0,1]^2 frame (the regional
    coordinate ablation), which drops global position information.
    """
    coords = np.zeros((boxes.batch, boxes.n_slots, 4), dtype=np.float64)
    for bi in range(boxes.batch):
        for ni in range(boxes.n_slots):
            box = boxes.boxes[bi][ni]
            coords[bi, ni] = (0.0, 0.0, 1.0, 1.0) if local_frame else box.as_array()
    k = 2.0 ** np.arange(freqs)
    ang = np.pi * coords[..., None] * k                       # (b, n, 4, F)
    feat = np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)
    return feat.reshape(boxes.batch, boxes.n_slots, 8 * freqs).astype(dtype())


@dataclass
class BoxGuidanceParams:
    """Gated attention of spatial tokens over caption-free box embeddings."""
    w_embed: Tensor  # (8F, c) learned projection of Fourier features
    attn: CrossAttnParams
    gate: Tensor     # scalar, tanh-gated, init 0 so training starts at identity

    @classmethod
    def init(cls, c: int, rng: np.random.Generator) -> "BoxGuidanceParams":
        w = T.tensor(rng.standard_normal((8 * FOURIER_FREQS, c))
                     / math.sqrt(8 * FOURIER_FREQS), requires_grad=True)
        return cls(w, CrossAttnParams.init(c, c, c, rng),
                   T.tensor(np.zeros(1), requires_grad=True))

    def named(self, prefix: str):
        out = self.attn.named(f"{prefix}.attn")
        out[f"{prefix}.w_embed"] = self.w_embed
        out[f"{prefix}.gate"] = self.gate
        return out


def box_guidance(fused: Tensor, boxes: RoiBoxBatch, p: BoxGuidanceParams,
                 local_frame: bool = False) -> Tensor:
    """Inject box positions after blending; exact identity when no box is valid."""
    b, c, h, w = fused.shape
    has_any = boxes.valid.any(axis=1)
    if not has_any.any():
        return fused
    feats = fourier_box_features(boxes, local_frame=local_frame)
    box_tokens = T.matmul(T.tensor(feats), p.w_embed)          # (b, n, c)
    tokens = spatial_to_tokens(fused)                          # (b, hw, c)
    # Items with zero valid boxes get a fully-unmasked dummy row to keep the
    # softmax well-defined; their contribution is zeroed afterwards.
    key_mask = np.where(has_any[:, None], boxes.valid, True)[:, None, :]
    out = cross_attention(tokens, box_tokens, p.attn, key_mask=key_mask)
    keep = has_any.astype(fused.data.dtype)[:, None, None]
    out = T.mul(out, T.tensor(keep))
    gated = T.mul(out, T.tanh(p.gate))
    return tokens_to_spatial(T.add(tokens, gated), h, w)


@dataclass
class EmbedInjectParams:
    """GLIGEN-style grounding-token injection (optional baseline)."""
    w1: Tensor   # (d + 8F, hidden)
    b1: Tensor
    w2: Tensor   # (hidden, c)
    b2: Tensor
    attn: CrossAttnParams
    gate: Tensor

    @classmethod
    def init(cls, c: int, d: int, rng: np.random.Generator,
             hidden: int = 64) -> "EmbedInjectParams":
        fan = d + 8 * FOURIER_FREQS

        def w(fan_in, shape):
            return T.tensor(rng.standard_normal(shape) / math.sqrt(fan_in),
                            requires_grad=True)
        return cls(w(fan, (fan, hidden)), T.tensor(np.zeros(hidden), requires_grad=True),
                   w(hidden, (hidden, c)), T.tensor(np.zeros(c), requires_grad=True),
                   CrossAttnParams.init(c, c, c, rng),
                   T.tensor(np.zeros(1), requires_grad=True))

    def named(self, prefix: str):
        out = self.attn.named(f"{prefix}.attn")
        out.update({f"{prefix}.w1": self.w1, f"{prefix}.b1": self.b1,
                    f"{prefix}.w2": self.w2, f"{prefix}.b2": self.b2,
                    f"{prefix}.gate": self.gate})
        return out


def embedding_injection_baseline(feature: Tensor, captions: Tensor,
                                 boxes: RoiBoxBatch, p: EmbedInjectParams) -> Tensor:
    """Fuse pooled caption + box embeddings into grounding tokens, then run
    gated self-attention with those tokens appended; identity at gate 0."""
    b, c, h, w = feature.shape
    n = boxes.n_slots
    pooled = T.tmean(captions, axis=2)                          # (b, n, d)
    feats = T.tensor(fourier_box_features(boxes))               # (b, n, 8F)
    grounding = T.concat([pooled, feats], axis=2)
    grounding = T.add(T.matmul(T.silu(T.add(T.matmul(grounding, p.w1), p.b1)),
                               p.w2), p.b2)                     # (b, n, c)
    tokens = spatial_to_tokens(feature)                         # (b, hw, c)
    allt = T.concat([tokens, grounding], axis=1)                # (b, hw+n, c)
    key_mask = np.concatenate(
        [np.ones((b, h * w), dtype=bool), boxes.valid], axis=1)[:, None, :]
    out = cross_attention(allt, allt, p.attn, key_mask=key_mask)
    out = T.narrow(out, 1, 0, h * w)
    gated = T.mul(out, T.tanh(p.gate))
    return tokens_to_spatial(T.add(tokens, gated), h, w)
