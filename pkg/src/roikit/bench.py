"""Compute-cost comparison of the two instance-injection paths.

Analytic FLOP model
-------------------
Per-query cost of single-head attention of N queries (width c) over L keys:

    attn(N, L, c) = 2*N*c^2 (q proj) + 2*N*c^2 (out proj)
                  + 4*N*L*c (logits + values)

The key/value projection cost (4*L*c^2) is identical for both paths at
equal L and independent of the query count, so it is excluded from the
per-instance terms; this keeps attn() exactly proportional to N.

* mask path instance term:  n * attn(h*w, L, c) + n*h*w*c (mask multiply)
* crop path instance term:  n * attn(r*r, L, c)
  plus scatter cost 8*c*(r*r) (align taps) + 8*c*footprint (unpool taps)
* both paths share the global term attn(h*w, L_g, c).

The crop path's instance-attention term is independent of (h, w); only the
scatter term scales with the box footprint. Wall-clock medians come from a
monotonic clock over warm runs; transient allocation peaks are taken from
the tracemalloc-instrumented allocator.
"""
from __future__ import annotations

import csv
import time
import tracemalloc
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import tensor as T
from .attention import CrossAttnParams, cross_attention, masked_instance_attention
from .roi_ops import RoiBox, RoiBoxBatch, roi_align, roi_unpool

CSV_HEADER = ["path", "h", "w", "r", "n", "c", "L",
              "flops_analytic", "ns_median", "bytes_peak"]
DEFAULT_BOX_AREA = 0.04  # assumed mean footprint fraction for the analytic scatter term


def attention_flops(n_queries: int, n_keys: int, c: int) -> float:
    return 4 * n_queries * c * c + 4 * n_queries * n_keys * c


def flop_model(path: str, h: int, w: int, r: int, n: int, c: int, L: int,
               footprint_frac: float = DEFAULT_BOX_AREA) -> Dict[str, float]:
    """Analytic FLOPs, broken into global/instance-attention/scatter terms."""
    if min(h, w, r, c, L) < 1 or n < 0:
        raise ValueError("extents must be positive (n may be zero)")
    global_term = attention_flops(h * w, 1, c)
    if path == "mask":
        instance = n * (attention_flops(h * w, L, c) + h * w * c)
        scatter = 0.0
    elif path == "roi":
        instance = n * attention_flops(r * r, L, c)
        scatter = n * 8.0 * c * (r * r + footprint_frac * h * w)
    else:
        raise ValueError(f"unknown path {path!r}, expected 'mask' or 'roi'")
    return {"global": float(global_term), "instance_attn": float(instance),
            "scatter": float(scatter),
            "total": float(global_term + instance + scatter)}


@dataclass
class BenchConfig:
    h: int
    w: int
    r: int = 25
    n: int = 25
    c: int = 64
    L: int = 4


@dataclass
class CostReport:
    path: str
    config: BenchConfig
    flops_analytic: float
    ns_median: float
    bytes_peak: int

    def as_row(self) -> list:
        cf = self.config
        return [self.path, cf.h, cf.w, cf.r, cf.n, cf.c, cf.L,
                f"{self.flops_analytic:.0f}", f"{self.ns_median:.0f}",
                self.bytes_peak]


def _make_inputs(cf: BenchConfig, rng: np.random.Generator):
    feature = T.tensor(rng.standard_normal((1, cf.c, cf.h, cf.w)))
    boxes = []
    side = np.sqrt(DEFAULT_BOX_AREA)
    for _ in range(cf.n):
        x1 = float(rng.uniform(0, 1 - side))
        y1 = float(rng.uniform(0, 1 - side))
        boxes.append(RoiBox(x1, y1, x1 + side, y1 + side))
    batch = RoiBoxBatch.from_lists([boxes], capacity=max(cf.n, 1))
    captions = T.tensor(rng.standard_normal((1, max(cf.n, 1), cf.L, cf.c)))
    params = CrossAttnParams.init(cf.c, cf.c, cf.c, rng)
    return feature, batch, captions, params


def _run_mask(feature, batch, captions, params):
    return masked_instance_attention(feature, captions, batch, params)


def _run_roi(feature, batch, captions, params, r):
    b, c, h, w = feature.shape
    n = batch.n_slots
    roi = roi_align(feature, batch, r)
    flat = T.reshape(T.moveaxis(T.reshape(roi, (b * n, c, r * r)), 1, 2),
                     (b * n, r * r, c))
    cap = T.reshape(captions, (b * n, captions.shape[2], c))
    out = cross_attention(flat, cap, params)
    out = T.reshape(T.moveaxis(out, 1, 2), (b, n, c, r, r))
    return roi_unpool(out, batch, h, w)[0]


def measure(cf: BenchConfig, seed: int = 0, repeats: int = 5,
            warmup: int = 2) -> List[CostReport]:
    """Time both paths on identical random inputs (medians of warm runs).

    The two paths intentionally do NOT produce equal outputs: the mask path
    carries quantization error by design.
    """
    rng = np.random.default_rng(seed)
    feature, batch, captions, params = _make_inputs(cf, rng)
    reports = []
    for path, fn in (("mask", lambda: _run_mask(feature, batch, captions, params)),
                     ("roi", lambda: _run_roi(feature, batch, captions, params, cf.r))):
        for _ in range(warmup):
            fn()
        times = []
        for _ in range(repeats):
            t0 = time.perf_counter_ns()
            fn()
            times.append(time.perf_counter_ns() - t0)
        tracemalloc.start()
        fn()
        _, peak = tracemalloc.get_traced_memory()
        tracemalloc.stop()
        flops = flop_model(path, cf.h, cf.w, cf.r, cf.n, cf.c, cf.L)["total"]
        reports.append(CostReport(path, cf, flops, float(np.median(times)), peak))
    return reports


def run_bench(configs: Sequence[BenchConfig], seed: int = 0,
              out_csv: Optional[str] = None, repeats: int = 5,
              budget_elements: int = 1 << 27) -> List[CostReport]:
    """Benchmark a config grid; over-budget configs are skipped with a note."""
    reports: List[CostReport] = []
    skipped = []
    for cf in configs:
        if cf.h * cf.w * max(cf.n, 1) * cf.c > budget_elements:
            skipped.append((cf, "exceeds element budget"))
            continue
        reports.extend(measure(cf, seed=seed, repeats=repeats))
    if out_csv:
        with open(out_csv, "w", newline="") as fh:
            writer = csv.writer(fh)
            fh.write("# attn(N,L,c) = 4*N*c^2 + 4*N*L*c;"
                     " mask instance term = n*(attn(h*w,L,c) + h*w*c);"
                     " roi instance term = n*attn(r*r,L,c)"
                     " + 8*c*n*(r*r + footprint)\n")
            writer.writerow(CSV_HEADER)
            for rep in reports:
                writer.writerow(rep.as_row())
            for cf, reason in skipped:
                writer.writerow(["skipped", cf.h, cf.w, cf.r, cf.n, cf.c, cf.L,
                                 reason, "", ""])
    return reports
