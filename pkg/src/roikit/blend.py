"""Learnable blending of global and per-instance attention outputs.

The (n+1) attention maps (slot 0 = global) are reweighted per pixel by a
softmax over slot logits, one logit per slot from a single shared 1x1
convolution. Slots whose instance does not cover a pixel are masked out, so
outside every footprint the fused output equals the global map bit-for-bit.
A regularizer penalizes the global slot's weight inside footprints, pushing
instance captions to dominate their own regions.
"""
from __future__ import annotations

from typing import Tuple

import numpy as np

from . import tensor as T
from .tensor import Tensor

REG_WEIGHT_DEFAULT = 0.01  # blend-regularizer coefficient in the total loss


def learnable_blend(global_out: Tensor, instance_out: Tensor,
                    occupancy: np.ndarray, valid: np.ndarray,
                    conv_w: Tensor, conv_b: Tensor
                    ) -> Tuple[Tensor, Tensor, np.ndarray]:
    """Fuse (b,c,h,w) global and (b,n,c,h,w) instance maps.

    Returns (fused (b,c,h,w), weights (b,n+1,1,h,w), slot validity mask).
    """
    b, c, h, w = global_out.shape
    n = instance_out.shape[1]
    logits_g = T.reshape(T.conv1x1(global_out, conv_w, conv_b), (b, 1, 1, h, w))
    flat = T.reshape(instance_out, (b * n, c, h, w))
    logits_r = T.reshape(T.conv1x1(flat, conv_w, conv_b), (b, n, 1, h, w))
    logits = T.concat([logits_g, logits_r], axis=1)            # (b, n+1, 1, h, w)

    slot_mask = np.ones((b, n + 1, 1, h, w), dtype=bool)
    slot_mask[:, 1:] = (occupancy > 0) & valid[:, :, None, None, None]
    weights = T.softmax(logits, axis=1, mask=slot_mask)

    stack = T.concat([T.reshape(global_out, (b, 1, c, h, w)), instance_out], axis=1)
    fused = T.tsum(T.mul(weights, stack), axis=1)              # (b, c, h, w)
    return fused, weights, slot_mask


def reg_loss(weights: Tensor, foreground: np.ndarray) -> Tensor:
    """Mean global-slot blend weight over foreground pixels; 0 if no foreground."""
    fg = np.asarray(foreground, dtype=weights.data.dtype)      # (b, 1, h, w)
    total = float(fg.sum())
    if total == 0.0:
        return T.tensor(0.0)
    w_global = T.reshape(T.narrow(weights, 1, 0, 1), fg.shape)
    return T.scale(T.tsum(T.mul(w_global, T.tensor(fg))), 1.0 / total)


def total_loss(l_ldm: Tensor, l_reg: Tensor, alpha: float = REG_WEIGHT_DEFAULT) -> Tensor:
    if alpha < 0:
        raise ValueError(f"alpha must be >= 0, got {alpha}")
    return T.add(l_ldm, T.scale(l_reg, alpha))
