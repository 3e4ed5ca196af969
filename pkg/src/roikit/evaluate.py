"""Detection, matching and metrics for generated toy scenes, plus the
dense-matrix correctness oracles for the ROI kernels.

The detector is rule-based and exact for the closed palette: nearest-color
classification per pixel, connected components per color, and a fill-ratio
signature for the shape (square fills its bounding box, a circle ~ pi/4 of
it, a triangle ~ 1/2). Triangles get their generating box reconstructed
from area = width * height / 2 because the apex rarely covers a pixel
center. Matching maximizes total IoU over one-to-one pairs.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage
from scipy.optimize import linear_sum_assignment

from .roi_ops import RoiBox
from . import scenes as sc

MIN_COMPONENT_PX = 8
SQUARE_FILL_CUT = 0.875   # midway between 1.0 and pi/4
CIRCLE_FILL_CUT = 0.64    # midway between pi/4 and 1/2
VISIBILITY_CUT = 0.5      # attribute scoring needs >= 50% of footprint visible


@dataclass
class Detection:
    box: RoiBox
    color_id: int
    shape_id: int
    confidence: float


@dataclass
class MatchResult:
    pairs: List[Tuple[int, int]]       # (ground-truth index, detection index)
    unmatched_gt: List[int]
    unmatched_det: List[int]


def iou(a: RoiBox, b: RoiBox) -> float:
    return sc.box_iou_xyxy(a, b)


def _classify_pixels(image: np.ndarray) -> np.ndarray:
    """Nearest-palette label per pixel: instance colors then backgrounds."""
    palette = np.concatenate([sc.COLOR_VALUES, sc.BACKGROUND_VALUES], axis=0)
    flat = image.reshape(3, -1).T[:, None, :]                    # (hw, 1, 3)
    d2 = ((flat - palette[None]) ** 2).sum(axis=2)               # (hw, P)
    return d2.argmin(axis=1).reshape(image.shape[1:])


def detect(image: np.ndarray, min_area: int = MIN_COMPONENT_PX) -> List[Detection]:
    """Detect colored shape instances in a (3, h, w) image in [-1, 1]."""
    h, w = image.shape[1:]
    labels = _classify_pixels(image)
    out: List[Detection] = []
    for cid in range(sc.N_COLORS):
        mask = labels == cid
        if not mask.any():
            continue
        comp, n_comp = ndimage.label(mask)
        for k in range(1, n_comp + 1):
            ys, xs = np.nonzero(comp == k)
            area = ys.size
            if area < min_area:
                continue
            y1, y2 = ys.min(), ys.max() + 1
            x1, x2 = xs.min(), xs.max() + 1
            fill = area / ((y2 - y1) * (x2 - x1))
            if fill >= SQUARE_FILL_CUT:
                shape_id = sc.SHAPE_NAMES.index("square")
            elif fill >= CIRCLE_FILL_CUT:
                shape_id = sc.SHAPE_NAMES.index("circle")
            else:
                shape_id = sc.SHAPE_NAMES.index("triangle")
                # The apex row rarely covers a pixel center; recover the
                # generating box height from area = w * h / 2.
                est_h = 2.0 * area / (x2 - x1)
                y1 = max(0, int(round(y2 - est_h)))
            out.append(Detection(
                RoiBox(x1 / w, y1 / h, x2 / w, y2 / h), cid, shape_id,
                confidence=min(1.0, area / min_area / 4.0)))
    return out


def hungarian_match(cost: np.ndarray) -> MatchResult:
    """Optimal one-to-one assignment maximizing total IoU; zero-IoU pairs drop."""
    cost = np.asarray(cost, dtype=np.float64)
    if cost.size == 0:
        return MatchResult([], list(range(cost.shape[0])), list(range(cost.shape[1])))
    rows, cols = linear_sum_assignment(cost, maximize=True)
    pairs = [(int(r), int(c)) for r, c in zip(rows, cols) if cost[r, c] > 0.0]
    matched_r = {r for r, _ in pairs}
    matched_c = {c for _, c in pairs}
    return MatchResult(
        pairs,
        [i for i in range(cost.shape[0]) if i not in matched_r],
        [j for j in range(cost.shape[1]) if j not in matched_c])


def _visibility(scene: sc.ToyScene) -> List[float]:
    """Visible fraction of each instance footprint after occlusion by draw order."""
    h, w = scene.image.shape[1:]
    masks = [sc._shape_interior(s, b, h, w)
             for b, s in zip(scene.boxes, scene.shape_ids)]
    vis = []
    for i, m in enumerate(masks):
        total = m.sum()
        covered = m.copy()
        for later in masks[i + 1:]:
            covered &= ~later
        vis.append(float(covered.sum() / total) if total else 0.0)
    return vis


@dataclass
class Metrics:
    miou: float
    acc_color: float
    acc_shape: float
    success_rate: float
    n_instances: int

    def as_row(self) -> dict:
        return {"mIoU": self.miou, "acc_color": self.acc_color,
                "acc_shape": self.acc_shape, "success_rate": self.success_rate}


def bench_metrics(scenes: Sequence[sc.ToyScene], images: Sequence[np.ndarray],
                  size_bucket: Optional[str] = None) -> Metrics:
    """Score generated images against their scenes.

    Unmatched ground truths count as IoU 0 (missing instances are penalized).
    Attribute accuracy is scored over matched pairs whose ground-truth
    instance is at least half visible. ``size_bucket`` of "small"/"large"
    restricts scoring to footprints below/above (H/8)^2 pixels.
    """
    if len(scenes) != len(images):
        raise ValueError("scenes and images must have equal length")
    iou_sum, n_gt = 0.0, 0
    attr_total, color_ok, shape_ok, success = 0, 0, 0, 0
    for scene, image in zip(scenes, images):
        h, w = image.shape[1:]
        small_cut = (h / 8) * (w / 8)
        keep = []
        for i, box in enumerate(scene.boxes):
            px = box.area * h * w
            if size_bucket == "small" and px >= small_cut:
                continue
            if size_bucket == "large" and px < small_cut:
                continue
            keep.append(i)
        if not keep:
            continue
        dets = detect(image)
        vis = _visibility(scene)
        cost = np.array([[iou(scene.boxes[i], d.box) for d in dets] for i in keep])
        if cost.size == 0:
            n_gt += len(keep)
            continue
        match = hungarian_match(cost)
        n_gt += len(keep)
        for row, det_j in match.pairs:
            i = keep[row]
            pair_iou = cost[row, det_j]
            iou_sum += pair_iou
            det = dets[det_j]
            if vis[i] >= VISIBILITY_CUT:
                attr_total += 1
                c_ok = det.color_id == scene.color_ids[i]
                s_ok = det.shape_id == scene.shape_ids[i]
                color_ok += c_ok
                shape_ok += s_ok
                success += (pair_iou >= 0.5) and c_ok and s_ok
    return Metrics(
        miou=iou_sum / n_gt if n_gt else 0.0,
        acc_color=color_ok / attr_total if attr_total else 0.0,
        acc_shape=shape_ok / attr_total if attr_total else 0.0,
        success_rate=success / attr_total if attr_total else 0.0,
        n_instances=n_gt)


# ---------------------------------------------------------------------------
# dense interpolation-matrix oracles
# ---------------------------------------------------------------------------

ORACLE_BUDGET = 1 << 22  # max entries per oracle matrix


def dense_oracle_matrices(box: RoiBox, r: int, h: int, w: int
                          ) -> Tuple[np.ndarray, np.ndarray]:
    """Explicit interpolation matrices S (align) and U (unpool) for one box.

    Written as independent scalar loops: align(x) == S @ vec(x) and
    unpool(y) == U @ vec(y) for a single-channel field, exactly at 64-bit.
    """
    if r * r * h * w > ORACLE_BUDGET:
        raise ValueError(f"oracle matrix budget exceeded: {r}x{r} vs {h}x{w}")
    def _axis_taps(lo: float, hi: float, extent: int, cell: int):
        # Two (index, weight) taps for one axis; an edge clamp that collapses
        # both neighbors onto the border pixel folds the weight onto the
        # first tap so each tap has a distinct lattice column.
        span = (hi - lo) * extent
        s = lo * extent + (cell + 0.5) * span / r - 0.5
        i0 = int(np.floor(s))
        w1 = s - i0
        w0 = 1.0 - w1
        i0c = min(max(i0, 0), extent - 1)
        i1c = min(max(i0 + 1, 0), extent - 1)
        if i0c == i1c:
            w0, w1 = w0 + w1, 0.0
        return ((i0c, w0), (i1c, w1))

    S = np.zeros((r * r, h * w), dtype=np.float64)
    for i in range(r):
        y_taps = _axis_taps(box.y1, box.y2, h, i)
        for j in range(r):
            x_taps = _axis_taps(box.x1, box.x2, w, j)
            for (yy, wy) in y_taps:
                for (xx, wx) in x_taps:
                    S[i * r + j, yy * w + xx] += wy * wx
    U = np.zeros((h * w, r * r), dtype=np.float64)
    for py in range(h):
        cy = py + 0.5
        if not (box.y1 * h < cy < box.y2 * h):
            continue
        gy = (cy - box.y1 * h) / ((box.y2 - box.y1) * h) * r - 0.5
        for px in range(w):
            cx = px + 0.5
            if not (box.x1 * w < cx < box.x2 * w):
                continue
            gx = (cx - box.x1 * w) / ((box.x2 - box.x1) * w) * r - 0.5
            j0y, j0x = int(np.floor(gy)), int(np.floor(gx))
            fy, fx = gy - j0y, gx - j0x
            pts = []
            for (jy, wy) in ((j0y, 1 - fy), (j0y + 1, fy)):
                for (jx, wx) in ((j0x, 1 - fx), (j0x + 1, fx)):
                    if 0 <= jy <= r - 1 and 0 <= jx <= r - 1:
                        pts.append((jy, jx, wy * wx))
            total = sum(wgt for _, _, wgt in pts)
            assert total > 0.0, "pixel inside footprint must see a lattice point"
            for jy, jx, wgt in pts:
                U[py * w + px, jy * r + jx] += wgt / total
    return S, U
