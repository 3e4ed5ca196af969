"""Self-contained correctness suite: dense-matrix oracles, finite-difference
gradient checks, round-trip identities, adjointness and matcher brute force.

Each check returns (name, passed, detail); the CLI prints one line per check
and exits nonzero if any fails. ``unpool_fn``/``align_fn`` are injectable so
mutation tests can verify that a broken kernel is actually caught.
"""
from __future__ import annotations

import itertools
import math
from typing import Callable, List, Optional, Tuple

import numpy as np

from . import tensor as T
from .attention import CrossAttnParams, RoiSelfAttnParams, cross_attention, roi_self_attention
from .blend import learnable_blend, reg_loss
from .evaluate import dense_oracle_matrices, hungarian_match
from .model import roi_size
from .precision import precision
from .roi_ops import RoiBox, RoiBoxBatch, roi_align, roi_unpool
from .tensor import Tensor

CheckResult = Tuple[str, bool, str]


def finite_difference_grad(fn: Callable[[np.ndarray], float], x: np.ndarray,
                           h: float = 1e-6) -> np.ndarray:
    """Central differences, elementwise; fn maps an array to a scalar."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = fn(x)
        flat[i] = orig - h
        fm = fn(x)
        flat[i] = orig
        gf[i] = (fp - fm) / (2 * h)
    return g


def gradcheck(build: Callable[[Tensor], Tensor], x0: np.ndarray,
              rtol: float = 1e-4, atol: float = 1e-7) -> Tuple[bool, float]:
    """Compare reverse-mode grads of a scalar-valued graph against central
    differences at 64-bit."""
    with precision("f64"):
        x = T.tensor(x0.astype(np.float64), requires_grad=True)
        out = build(x)
        out.backward()
        analytic = x.grad.copy()

        def scalar(arr):
            return build(T.tensor(arr.astype(np.float64))).item()

        numeric = finite_difference_grad(scalar, x0.astype(np.float64))
    err = np.abs(analytic - numeric)
    tol = atol + rtol * np.abs(numeric)
    return bool(np.all(err <= tol)), float((err - tol).max())


def _random_box(rng) -> RoiBox:
    x1 = float(rng.uniform(0.0, 0.6))
    y1 = float(rng.uniform(0.0, 0.6))
    return RoiBox(x1, y1, x1 + float(rng.uniform(0.15, 1.0 - x1 - 0.01)),
                  y1 + float(rng.uniform(0.15, 1.0 - y1 - 0.01)))


def _ordered_dot(M: np.ndarray, v: np.ndarray) -> np.ndarray:
    """M @ v with a fixed left-to-right accumulation over each sparse row.

    BLAS reorders sums (blocking, FMA), which perturbs the last bit; the
    exactness checks need the same association order the kernels use, which
    is ascending column index within each row.
    """
    out = np.zeros(M.shape[0], dtype=v.dtype)
    for row in range(M.shape[0]):
        acc = 0.0
        for col in np.nonzero(M[row])[0]:
            acc += M[row, col] * v[col]
        out[row] = acc
    return out


def _ordered_transpose_dot(M: np.ndarray, g: np.ndarray) -> np.ndarray:
    """M.T @ g accumulated row-major over M, matching the kernels' scatter."""
    out = np.zeros(M.shape[1], dtype=g.dtype)
    for row in range(M.shape[0]):
        for col in np.nonzero(M[row])[0]:
            out[col] += M[row, col] * g[row]
    return out


def check_dense_oracle(seeds: int = 50,
                       align_fn=roi_align, unpool_fn=roi_unpool) -> CheckResult:
    """Kernel forward and vjp equal dense-matrix products/transposes exactly
    at 64-bit."""
    with precision("f64"):
        rng = np.random.default_rng(7)
        worst = 0.0
        for _ in range(seeds):
            h, w = int(rng.integers(4, 12)), int(rng.integers(4, 12))
            r = int(rng.integers(1, 8))
            box = _random_box(rng)
            batch = RoiBoxBatch.from_lists([[box]])
            S, U = dense_oracle_matrices(box, r, h, w)
            x = T.tensor(rng.standard_normal((1, 1, h, w)), requires_grad=True)
            out = align_fn(x, batch, r)
            worst = max(worst, float(np.abs(
                out.data.reshape(-1) - _ordered_dot(S, x.data.reshape(-1))).max()))
            g = rng.standard_normal(out.shape)
            out.backward(g)
            worst = max(worst, float(np.abs(
                x.grad.reshape(-1) - _ordered_transpose_dot(S, g.reshape(-1))).max()))
            y = T.tensor(rng.standard_normal((1, 1, 1, r, r)), requires_grad=True)
            u_out, _ = unpool_fn(y, batch, h, w)
            worst = max(worst, float(np.abs(
                u_out.data.reshape(-1) - _ordered_dot(U, y.data.reshape(-1))).max()))
            gu = rng.standard_normal(u_out.shape)
            u_out.backward(gu)
            worst = max(worst, float(np.abs(
                y.grad.reshape(-1) - _ordered_transpose_dot(U, gu.reshape(-1))).max()))
    return ("dense-oracle forward+vjp", worst == 0.0, f"max abs err {worst:.3g}")


def check_adjointness(seeds: int = 50,
                      align_fn=roi_align, unpool_fn=roi_unpool) -> CheckResult:
    """<K x, y> == <x, K^T y> exactly at 64-bit for both kernels' vjps."""
    with precision("f64"):
        rng = np.random.default_rng(11)
        worst = 0.0
        for _ in range(seeds):
            h, w = int(rng.integers(4, 10)), int(rng.integers(4, 10))
            r = int(rng.integers(1, 7))
            batch = RoiBoxBatch.from_lists([[_random_box(rng)]])
            x = T.tensor(rng.standard_normal((1, 1, h, w)), requires_grad=True)
            y = rng.standard_normal((1, 1, 1, r, r))
            out = align_fn(x, batch, r)
            out.backward(y)
            lhs = float((out.data * y).sum())
            rhs = float((x.data * x.grad).sum())
            worst = max(worst, abs(lhs - rhs))
            u_in = T.tensor(rng.standard_normal((1, 1, 1, r, r)), requires_grad=True)
            z = rng.standard_normal((1, 1, 1, h, w))
            u_out, _ = unpool_fn(u_in, batch, h, w)
            u_out.backward(z)
            lhs = float((u_out.data * z).sum())
            rhs = float((u_in.data * u_in.grad).sum())
            worst = max(worst, abs(lhs - rhs))
    return ("adjointness", worst < 1e-12, f"max |<Kx,y> - <x,K'y>| = {worst:.3g}")


def check_round_trip(align_fn=roi_align, unpool_fn=roi_unpool) -> CheckResult:
    """Full-footprint boxes with r = side give unpool(align(x)) == x exactly,
    and affine fields reproduce within 1e-5 in footprint interiors."""
    with precision("f64"):
        rng = np.random.default_rng(3)
        ok, detail = True, []
        for side in (4, 7, 10):
            batch = RoiBoxBatch.from_lists([[RoiBox(0, 0, 1, 1)]])
            x = rng.standard_normal((1, 2, side, side))
            roi = align_fn(T.tensor(x), batch, side)
            back, occ = unpool_fn(roi, batch, side, side)
            exact = np.array_equal(back.data[0, 0], x[0])
            ok &= exact and occ.min() == 1.0
            detail.append(f"identity@{side}:{'ok' if exact else 'FAIL'}")
        # affine reproduction away from renormalized borders
        h = w = 16
        xs = (np.arange(w) + 0.5) / w
        field = np.broadcast_to(xs, (1, 1, h, w)).astype(np.float64)
        box = RoiBox(0.15, 0.2, 0.85, 0.9)
        batch = RoiBoxBatch.from_lists([[box]])
        roi = align_fn(T.tensor(field.copy()), batch, 9)
        back, occ = unpool_fn(roi, batch, h, w)
        interior = _footprint_interior(box, h, w, 9)
        err = np.abs(back.data[0, 0, 0] - field[0, 0])[interior].max() if interior.any() else 0.0
        ok &= err < 1e-5
        detail.append(f"affine err {err:.2g}")
    return ("round-trip identity", bool(ok), "; ".join(detail))


def _footprint_interior(box: RoiBox, h: int, w: int, r: int) -> np.ndarray:
    """Pixels whose bilinear support is fully inside the ROI lattice hull."""
    cy = np.arange(h) + 0.5
    cx = np.arange(w) + 0.5
    gy = (cy - box.y1 * h) / ((box.y2 - box.y1) * h) * r - 0.5
    gx = (cx - box.x1 * w) / ((box.x2 - box.x1) * w) * r - 0.5
    iy = (gy >= 0) & (gy <= r - 1)
    ix = (gx >= 0) & (gx <= r - 1)
    return iy[:, None] & ix[None, :]


def _probe_cases(rng):
    """(name, graph builder, input) triples with frozen probe constants."""
    b = rng.standard_normal((4, 2))
    p_mm = rng.standard_normal((3, 2))
    p_ln = rng.standard_normal((2, 6))
    p_sm = rng.standard_normal((3, 5))
    w_cv = rng.standard_normal((2, 3))
    return [
        ("matmul",
         lambda x: T.tsum(T.mul(T.matmul(x, T.tensor(b)), T.tensor(p_mm))),
         rng.standard_normal((3, 4))),
        ("silu", lambda x: T.tsum(T.silu(x)), rng.standard_normal((2, 5))),
        ("layer_norm",
         lambda x: T.tsum(T.mul(T.layer_norm(x, axis=-1), T.tensor(p_ln))),
         rng.standard_normal((2, 6))),
        ("softmax",
         lambda x: T.tsum(T.mul(T.softmax(x, axis=-1), T.tensor(p_sm))),
         rng.standard_normal((3, 5))),
        ("conv1x1",
         lambda x: T.tsum(T.conv1x1(x, T.tensor(w_cv))),
         rng.standard_normal((1, 3, 4, 4))),
    ]


def check_gradients(seeds: int = 20) -> CheckResult:
    """Finite-difference suite across the differentiable op set."""
    rng = np.random.default_rng(2)
    worst, ok = -np.inf, True
    for _ in range(seeds):
        for _name, build, x0 in _probe_cases(rng):
            passed, margin = gradcheck(build, x0)
            worst = max(worst, margin)
            ok &= passed
    return ("finite-difference gradients", bool(ok), f"worst margin {worst:.3g}")


def check_attention_gradients(seeds: int = 20) -> CheckResult:
    rng = np.random.default_rng(5)
    ok, worst = True, -np.inf
    with precision("f64"):
        for _ in range(seeds):
            p = CrossAttnParams.init(4, 4, 4, rng)
            cap = T.tensor(rng.standard_normal((1, 3, 4)))
            probe = T.tensor(rng.standard_normal((1, 5, 4)))

            def build(x):
                return T.tsum(T.mul(cross_attention(x, cap, p), probe))
            passed, margin = gradcheck(build, rng.standard_normal((1, 5, 4)))
            ok &= passed
            worst = max(worst, margin)
    return ("attention gradients", bool(ok), f"worst margin {worst:.3g}")


def check_hungarian(cases: int = 1000, max_size: int = 6) -> CheckResult:
    """Assignment totals equal brute-force enumeration on random matrices."""
    rng = np.random.default_rng(13)
    for _ in range(cases):
        g = int(rng.integers(1, max_size + 1))
        d = int(rng.integers(1, max_size + 1))
        cost = rng.uniform(0, 1, size=(g, d))
        got = sum(cost[r, c] for r, c in hungarian_match(cost).pairs)
        best = 0.0
        small, large = (g, d) if g <= d else (d, g)
        for perm in itertools.permutations(range(large), small):
            total = sum(cost[i, j] if g <= d else cost[j, i]
                        for i, j in enumerate(perm))
            best = max(best, total)
        if not math.isclose(got, best, rel_tol=1e-12, abs_tol=1e-12):
            return ("hungarian brute force", False,
                    f"got {got:.6f}, brute force {best:.6f}")
    return ("hungarian brute force", True, f"{cases} cases match")


def check_roi_schedule() -> CheckResult:
    want = {64: 25, 32: 19, 16: 13, 8: 7}
    got = {R: roi_size(R) for R in want}
    return ("roi size schedule", got == want, f"{got}")


_ROI_CHECKS = ("roi-dense-oracle", "roi-adjointness", "roi-round-trip")

ALL_CHECKS = {
    "roi-dense-oracle": check_dense_oracle,
    "roi-adjointness": check_adjointness,
    "roi-round-trip": check_round_trip,
    "gradients": check_gradients,
    "attention-gradients": check_attention_gradients,
    "hungarian": check_hungarian,
    "roi-schedule": check_roi_schedule,
}


def run_all(name_filter: Optional[str] = None, **overrides) -> List[CheckResult]:
    results = []
    for name, fn in ALL_CHECKS.items():
        if name_filter and name_filter not in name:
            continue
        kwargs = {}
        if name in _ROI_CHECKS:
            kwargs = {k: v for k, v in overrides.items() if k in ("align_fn", "unpool_fn")}
        results.append(fn(**kwargs))
    return results
