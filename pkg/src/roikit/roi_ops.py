"""ROI feature extraction and its complement: paste-back onto the full map.

``roi_align`` crops a fixed r x r grid from a box footprint by bilinear
sampling (no coordinate quantization, exactly one sample per output cell at
the cell center, half-pixel convention). ``roi_unpool`` is the complementary
scatter: every pixel whose center falls inside the continuous box footprint
is bilinearly reconstructed from the four nearest ROI sample points; at
footprint borders where fewer than four lattice points exist, the available
bilinear weights are renormalized to sum to 1. Pixels outside every
footprint stay empty (zero value, zero occupancy).

``quantized_mask`` reproduces the nearest-integer box rasterization used by
the masked-attention baseline, including its quantization error.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from .tensor import Tensor, ShapeError


@dataclass(frozen=True)
class RoiBox:
    """Axis-aligned box in normalized [0, 1] image coordinates."""
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if not (0.0 <= self.x1 < self.x2 <= 1.0 and 0.0 <= self.y1 < self.y2 <= 1.0):
            raise ValueError(f"degenerate or out-of-range box {self}")

    def as_array(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.x2, self.y2], dtype=np.float64)

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)


@dataclass
class RoiBoxBatch:
    """Fixed-capacity per-batch box slots with validity flags.

    Invalid slots are skipped by every operation and contribute zero
    gradient; this keeps layouts rectangular without ragged batching.
    """
    boxes: List[List[RoiBox]]            # [batch][slot]
    valid: np.ndarray                    # bool (batch, slots)

    def __post_init__(self):
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.valid.shape != (len(self.boxes), self.n_slots):
            raise ShapeError(
                f"valid mask shape {self.valid.shape} != (batch={len(self.boxes)}, "
                f"slots={self.n_slots})")

    @classmethod
    def from_lists(cls, per_item: List[List[RoiBox]], capacity: Optional[int] = None
                   ) -> "RoiBoxBatch":
        cap = capacity if capacity is not None else max((len(b) for b in per_item), default=0)
        cap = max(cap, 1)
        boxes, valid = [], np.zeros((len(per_item), cap), dtype=bool)
        filler = RoiBox(0.0, 0.0, 1.0, 1.0)
        for i, row in enumerate(per_item):
            if len(row) > cap:
                raise ValueError(f"{len(row)} boxes exceed capacity {cap}")
            boxes.append(list(row) + [filler] * (cap - len(row)))
            valid[i, :len(row)] = True
        return cls(boxes, valid)

    @property
    def batch(self) -> int:
        return len(self.boxes)

    @property
    def n_slots(self) -> int:
        return len(self.boxes[0]) if self.boxes else 0


def _align_axis_coords(lo: float, hi: float, extent: int, r: int):
    """Fractional source indices for the r cell-center samples on one axis.

    Cell j samples the continuous coordinate lo*extent + (j+0.5)*span/r; the
    half-pixel convention puts pixel i's center at i + 0.5, so the fractional
    index is that coordinate minus 0.5. Out-of-bounds neighbors are edge
    clamped; when the clamp collapses both neighbors onto the border pixel
    their weights are combined on the first tap (the second gets weight 0),
    matching the dense-oracle convention term for term.
    """
    span = (hi - lo) * extent
    f = lo * extent + (np.arange(r, dtype=np.float64) + 0.5) * span / r - 0.5
    i0 = np.floor(f).astype(np.int64)
    w1 = f - i0
    w0 = 1.0 - w1
    i0c = np.clip(i0, 0, extent - 1)
    i1c = np.clip(i0 + 1, 0, extent - 1)
    collide = i0c == i1c
    w0 = np.where(collide, w0 + w1, w0)
    w1 = np.where(collide, 0.0, w1)
    return i0c, i1c, w0, w1


def roi_align(feature: Tensor, boxes: RoiBoxBatch, r: int) -> Tensor:
    """Extract (b, n, c, r, r) ROI features by bilinear cell-center sampling."""
    if r < 1:
        raise ValueError(f"roi size r must be >= 1, got {r}")
    b, c, h, w = feature.shape
    if boxes.batch != b:
        raise ShapeError(f"feature batch {b} != box batch {boxes.batch}")
    n = boxes.n_slots
    x = feature.data
    out = np.zeros((b, n, c, r, r), dtype=x.dtype)
    plans = []
    for bi in range(b):
        for ni in range(n):
            if not boxes.valid[bi, ni]:
                plans.append(None)
                continue
            box = boxes.boxes[bi][ni]
            y0, y1i, wy0, wy1 = _align_axis_coords(box.y1, box.y2, h, r)
            x0, x1i, wx0, wx1 = _align_axis_coords(box.x1, box.x2, w, r)
            plans.append((bi, ni, y0, y1i, wy0, wy1, x0, x1i, wx0, wx1))
            fm = x[bi]
            out[bi, ni] = (
                fm[:, y0[:, None], x0[None, :]] * (wy0[:, None] * wx0[None, :])
                + fm[:, y0[:, None], x1i[None, :]] * (wy0[:, None] * wx1[None, :])
                + fm[:, y1i[:, None], x0[None, :]] * (wy1[:, None] * wx0[None, :])
                + fm[:, y1i[:, None], x1i[None, :]] * (wy1[:, None] * wx1[None, :]))

    def vjp(g):
        gx = np.zeros_like(x)
        for plan in plans:
            if plan is None:
                continue
            bi, ni, y0, y1i, wy0, wy1, x0, x1i, wx0, wx1 = plan
            gr = g[bi, ni]
            # One scatter per instance with the four taps stacked on the last
            # axis: np.add.at then accumulates cell-major, tap-minor, the same
            # order a row-by-row dense transpose product uses.
            iy4 = _stack_taps(y0[:, None], y0[:, None], y1i[:, None], y1i[:, None], r, r)
            ix4 = _stack_taps(x0[None, :], x1i[None, :], x0[None, :], x1i[None, :], r, r)
            w4 = np.stack([wy0[:, None] * wx0[None, :], wy0[:, None] * wx1[None, :],
                           wy1[:, None] * wx0[None, :], wy1[:, None] * wx1[None, :]],
                          axis=-1)
            _scatter_add(gx[bi], iy4, ix4, gr[:, :, :, None] * w4)
        return (gx,)

    return Tensor(out, parents=(feature,), vjp=vjp)


def _stack_taps(a, b, c, d, rows: int, cols: int) -> np.ndarray:
    """Stack four (broadcastable) index planes into a (rows, cols, 4) array."""
    shape = (rows, cols)
    return np.stack([np.broadcast_to(p, shape) for p in (a, b, c, d)], axis=-1)


def _scatter_add(dest: np.ndarray, iy4: np.ndarray, ix4: np.ndarray,
                 vals: np.ndarray) -> None:
    """Accumulate vals (c, py, px, 4) into dest (c, H, W) at (iy4, ix4).

    Uses np.bincount, which walks the flattened input sequentially — the
    same channel-major, cell-major, tap-minor order a row-by-row dense
    transpose product uses, so exactness against the oracle is preserved.
    """
    c, H, W = dest.shape
    plane = H * W
    flat = (iy4 * W + ix4).ravel()
    idx = (np.arange(c, dtype=np.int64)[:, None] * plane + flat[None, :]).ravel()
    acc = np.bincount(idx, weights=vals.reshape(c, -1).ravel(), minlength=c * plane)
    dest += acc.reshape(c, H, W).astype(dest.dtype, copy=False)


def _unpool_axis_plan(lo: float, hi: float, extent: int, r: int):
    """Per-axis scatter plan: covered pixel indices, lattice neighbors, weights.

    A pixel is covered iff its center lies strictly inside the continuous
    footprint. Its ROI-lattice coordinate g lies in (-0.5, r - 0.5); a
    bilinear neighbor that falls off the lattice keeps index clamped but
    weight zero, and the caller renormalizes the surviving 2-D weights so
    they sum to 1 per pixel.
    """
    centers = np.arange(extent, dtype=np.float64) + 0.5
    inside = (centers > lo * extent) & (centers < hi * extent)
    idx = np.nonzero(inside)[0]
    if idx.size == 0:
        return idx, idx, idx, np.zeros(0), np.zeros(0)
    span = (hi - lo) * extent
    g = (centers[idx] - lo * extent) / span * r - 0.5
    j0 = np.floor(g).astype(np.int64)
    w1 = g - j0
    w0 = 1.0 - w1
    # Zero out weights whose lattice neighbor is off-grid (footprint border).
    w0 = np.where(j0 < 0, 0.0, w0)
    w1 = np.where(j0 + 1 > r - 1, 0.0, w1)
    j0c = np.clip(j0, 0, r - 1)
    j1c = np.clip(j0 + 1, 0, r - 1)
    return idx, j0c, j1c, w0, w1


def roi_unpool(roi: Tensor, boxes: RoiBoxBatch, h: int, w: int
               ) -> Tuple[Tensor, np.ndarray]:
    """Scatter (b, n, c, r, r) ROI features back onto a (h, w) canvas.

    Returns the rank-5 per-instance map (b, n, c, h, w) and a non-
    differentiable occupancy mask (b, n, 1, h, w) that is 1 exactly where
    interpolation occurred.
    """
    if h < 1 or w < 1:
        raise ValueError(f"target extents must be >= 1, got {h}x{w}")
    b, n, c, r, r2 = roi.shape
    if r != r2:
        raise ShapeError(f"roi grid must be square, got {r}x{r2}")
    if boxes.batch != b or boxes.n_slots != n:
        raise ShapeError(
            f"roi extents (b={b}, n={n}) disagree with boxes "
            f"(b={boxes.batch}, n={boxes.n_slots})")
    x = roi.data
    out = np.zeros((b, n, c, h, w), dtype=x.dtype)
    occupancy = np.zeros((b, n, 1, h, w), dtype=x.dtype)
    plans = []
    for bi in range(b):
        for ni in range(n):
            if not boxes.valid[bi, ni]:
                plans.append(None)
                continue
            box = boxes.boxes[bi][ni]
            ys, j0y, j1y, wy0, wy1 = _unpool_axis_plan(box.y1, box.y2, h, r)
            xs, j0x, j1x, wx0, wx1 = _unpool_axis_plan(box.x1, box.x2, w, r)
            if ys.size == 0 or xs.size == 0:
                plans.append(None)
                continue
            # 2-D bilinear weights, renormalized per pixel over the taps that
            # actually exist on the lattice (border pixels have fewer than 4).
            w4 = np.stack([wy0[:, None] * wx0[None, :], wy0[:, None] * wx1[None, :],
                           wy1[:, None] * wx0[None, :], wy1[:, None] * wx1[None, :]],
                          axis=-1)
            total = ((w4[..., 0] + w4[..., 1]) + w4[..., 2]) + w4[..., 3]
            assert np.all(total > 0.0), "empty weight sum inside footprint is impossible"
            w4 = w4 / total[..., None]
            plans.append((bi, ni, ys, j0y, j1y, xs, j0x, j1x, w4))
            rf = x[bi, ni]
            patch = (
                rf[:, j0y[:, None], j0x[None, :]] * w4[..., 0]
                + rf[:, j0y[:, None], j1x[None, :]] * w4[..., 1]
                + rf[:, j1y[:, None], j0x[None, :]] * w4[..., 2]
                + rf[:, j1y[:, None], j1x[None, :]] * w4[..., 3])
            out[bi, ni][:, ys[:, None], xs[None, :]] = patch
            occupancy[bi, ni, 0][np.ix_(ys, xs)] = 1.0

    def vjp(g):
        gr = np.zeros_like(x)
        for plan in plans:
            if plan is None:
                continue
            bi, ni, ys, j0y, j1y, xs, j0x, j1x, w4 = plan
            gp = g[bi, ni][:, ys[:, None], xs[None, :]]
            py, px = ys.size, xs.size
            jy4 = _stack_taps(j0y[:, None], j0y[:, None], j1y[:, None], j1y[:, None], py, px)
            jx4 = _stack_taps(j0x[None, :], j1x[None, :], j0x[None, :], j1x[None, :], py, px)
            _scatter_add(gr[bi, ni], jy4, jx4, gp[:, :, :, None] * w4)
        return (gr,)

    return Tensor(out, parents=(roi,), vjp=vjp), occupancy


def quantized_mask(boxes: RoiBoxBatch, h: int, w: int) -> np.ndarray:
    """Nearest-integer box rasterization (b, n, 1, h, w), baseline-only.

    Deliberately reproduces the quantization error of mask-based injection:
    edges snap to round(edge * extent) before rasterizing.
    """
    def _round(v: float) -> int:
        return int(np.floor(v + 0.5))

    mask = np.zeros((boxes.batch, boxes.n_slots, 1, h, w), dtype=bool)
    for bi in range(boxes.batch):
        for ni in range(boxes.n_slots):
            if not boxes.valid[bi, ni]:
                continue
            box = boxes.boxes[bi][ni]
            x_lo, x_hi = _round(box.x1 * w), _round(box.x2 * w)
            y_lo, y_hi = _round(box.y1 * h), _round(box.y2 * h)
            mask[bi, ni, 0, y_lo:y_hi, x_lo:x_hi] = True
    return mask


def foreground_mask(occupancy: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """Union of valid instance footprints: (b, 1, h, w) boolean."""
    occ = occupancy > 0
    occ = occ & valid[:, :, None, None, None]
    return occ.any(axis=1)
