"""Synthetic multi-instance scenes: colored shapes in boxes over a flat background.

A scene is fully determined by (background word, per-instance color/shape
words, boxes, draw order); later instances occlude earlier ones. The fixed
closed vocabulary (8 colors x 3 shapes + 3 background words) keeps caption
embedding a table lookup and makes the rule-based detector exact.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .roi_ops import RoiBox, RoiBoxBatch

COLOR_NAMES = ["black", "white", "red", "green", "yellow", "blue", "pink", "purple"]
COLOR_VALUES = np.array([
    [-1.0, -1.0, -1.0],
    [1.0, 1.0, 1.0],
    [1.0, -1.0, -1.0],
    [-1.0, 1.0, -1.0],
    [1.0, 1.0, -1.0],
    [-1.0, -1.0, 1.0],
    [1.0, 0.5, 0.6],
    [0.0, -1.0, 0.2],
], dtype=np.float64)

SHAPE_NAMES = ["square", "circle", "triangle"]

BACKGROUND_NAMES = ["dark-room", "gray-room", "bright-room"]
BACKGROUND_VALUES = np.array([
    [-0.6, -0.6, -0.6],
    [0.05, 0.05, 0.05],
    [0.6, 0.6, 0.6],
], dtype=np.float64)

# Token id layout of the shared embedding table.
N_COLORS = len(COLOR_NAMES)
N_SHAPES = len(SHAPE_NAMES)
SHAPE_TOKEN_BASE = N_COLORS
BACKGROUND_TOKEN_BASE = N_COLORS + N_SHAPES
VOCAB_SIZE = N_COLORS + N_SHAPES + len(BACKGROUND_NAMES)


@dataclass
class ToyScene:
    image: np.ndarray                 # (3, h, w) in [-1, 1]
    boxes: List[RoiBox]               # draw order = occlusion order
    color_ids: List[int]
    shape_ids: List[int]
    background_id: int

    @property
    def n(self) -> int:
        return len(self.boxes)

    def instance_tokens(self, capacity: int) -> np.ndarray:
        """(capacity, 2) token ids: [color token, shape token] per slot."""
        out = np.zeros((capacity, 2), dtype=np.int64)
        for i, (c, s) in enumerate(zip(self.color_ids, self.shape_ids)):
            out[i] = (c, SHAPE_TOKEN_BASE + s)
        return out

    @property
    def global_token(self) -> int:
        return BACKGROUND_TOKEN_BASE + self.background_id


@dataclass
class LayoutSpec:
    """Sampling distribution for random scenes."""
    height: int = 64
    width: int = 64
    n_min: int = 1
    n_max: int = 6
    size_min: float = 0.2
    size_max: float = 0.55
    max_pair_iou: float = 0.3   # rejection threshold between sampled boxes
    snap_to_grid: bool = True   # align box edges to render-pixel boundaries


def _shape_interior(shape_id: int, box: RoiBox, h: int, w: int) -> np.ndarray:
    """Boolean (h, w) mask of pixel centers covered by the shape.

    Pixel-center membership matches the occupancy predicate of unpool, so
    rendered footprints line up with the crop path's sub-pixel footprints.
    """
    cy = np.arange(h, dtype=np.float64)[:, None] + 0.5
    cx = np.arange(w, dtype=np.float64)[None, :] + 0.5
    x1, y1, x2, y2 = box.x1 * w, box.y1 * h, box.x2 * w, box.y2 * h
    in_box = (cx > x1) & (cx < x2) & (cy > y1) & (cy < y2)
    name = SHAPE_NAMES[shape_id]
    if name == "square":
        return in_box
    if name == "circle":
        mx, my = (x1 + x2) / 2, (y1 + y2) / 2
        rx, ry = (x2 - x1) / 2, (y2 - y1) / 2
        return in_box & (((cx - mx) / rx) ** 2 + ((cy - my) / ry) ** 2 <= 1.0)
    # triangle: apex at the top center, base along the bottom edge
    mx = (x1 + x2) / 2
    t = np.clip((cy - y1) / (y2 - y1), 0.0, 1.0)
    half = t * (x2 - x1) / 2
    return in_box & (np.abs(cx - mx) <= half)


def rasterize(scene_boxes: List[RoiBox], color_ids: List[int], shape_ids: List[int],
              background_id: int, h: int, w: int, dtype=np.float64) -> np.ndarray:
    image = np.empty((3, h, w), dtype=np.float64)
    image[:] = BACKGROUND_VALUES[background_id][:, None, None]
    for box, cid, sid in zip(scene_boxes, color_ids, shape_ids):
        mask = _shape_interior(sid, box, h, w)
        image[:, mask] = COLOR_VALUES[cid][:, None]
    return image.astype(dtype)


def box_iou_xyxy(a: RoiBox, b: RoiBox) -> float:
    ix = max(0.0, min(a.x2, b.x2) - max(a.x1, b.x1))
    iy = max(0.0, min(a.y2, b.y2) - max(a.y1, b.y1))
    inter = ix * iy
    union = a.area + b.area - inter
    return inter / union if union > 0 else 0.0


def synth_scene(rng: np.random.Generator, spec: Optional[LayoutSpec] = None,
                n_override: Optional[int] = None) -> ToyScene:
    """Sample and render one scene. Identical rng state gives identical scenes."""
    spec = spec or LayoutSpec()
    n = n_override if n_override is not None else int(rng.integers(spec.n_min, spec.n_max + 1))
    background_id = int(rng.integers(len(BACKGROUND_NAMES)))
    boxes: List[RoiBox] = []
    for _ in range(n):
        for _attempt in range(64):
            bw = float(rng.uniform(spec.size_min, spec.size_max))
            bh = float(rng.uniform(spec.size_min, spec.size_max))
            x1 = float(rng.uniform(0.0, 1.0 - bw))
            y1 = float(rng.uniform(0.0, 1.0 - bh))
            x2, y2 = x1 + bw, y1 + bh
            if spec.snap_to_grid:
                # Pixel-boundary edges make the rasterize->detect round trip
                # exact; the ROI kernels themselves never rely on alignment.
                x1 = np.floor(x1 * spec.width + 0.5) / spec.width
                y1 = np.floor(y1 * spec.height + 0.5) / spec.height
                x2 = max(np.floor(x2 * spec.width + 0.5) / spec.width, x1 + 2 / spec.width)
                y2 = max(np.floor(y2 * spec.height + 0.5) / spec.height, y1 + 2 / spec.height)
                x2, y2 = min(x2, 1.0), min(y2, 1.0)
            cand = RoiBox(float(x1), float(y1), float(x2), float(y2))
            if all(box_iou_xyxy(cand, b) <= spec.max_pair_iou for b in boxes):
                break
        boxes.append(cand)
    color_ids = [int(rng.integers(N_COLORS)) for _ in range(n)]
    shape_ids = [int(rng.integers(N_SHAPES)) for _ in range(n)]
    image = rasterize(boxes, color_ids, shape_ids, background_id,
                      spec.height, spec.width)
    return ToyScene(image, boxes, color_ids, shape_ids, background_id)


def scenes_to_batch(scenes: List[ToyScene], capacity: Optional[int] = None):
    """Pack scenes into (images, boxes, instance tokens, global tokens)."""
    cap = capacity if capacity is not None else max((s.n for s in scenes), default=1)
    cap = max(cap, 1)
    images = np.stack([s.image for s in scenes]).astype(np.float64)
    boxes = RoiBoxBatch.from_lists([s.boxes for s in scenes], capacity=cap)
    inst = np.stack([s.instance_tokens(cap) for s in scenes])
    glob = np.array([s.global_token for s in scenes], dtype=np.int64)
    return images, boxes, inst, glob
