"""Analytic FLOP model identities and the measured-cost harness."""
import csv

import numpy as np
import pytest

from roikit.bench import (BenchConfig, CostReport, attention_flops, flop_model,
                          measure, run_bench)


def test_attention_flops_hand_checked():
    # 4*N*c^2 + 4*N*L*c with N=2, L=3, c=4: 4*2*16 + 4*2*3*4 = 224.
    assert attention_flops(2, 3, 4) == 224


def test_attention_flops_proportional_to_queries():
    one = attention_flops(1, 5, 16)
    assert attention_flops(10, 5, 16) == 10 * one


def test_flop_model_zero_instances_is_global_only():
    for path in ("mask", "roi"):
        out = flop_model(path, 32, 32, 7, 0, 16, 4)
        assert out["instance_attn"] == 0.0 and out["scatter"] == 0.0
        assert out["total"] == out["global"]


def test_flop_model_roi_instance_term_independent_of_canvas():
    a = flop_model("roi", 32, 32, 7, 5, 16, 4)["instance_attn"]
    b = flop_model("roi", 256, 256, 7, 5, 16, 4)["instance_attn"]
    assert a == b


def test_flop_model_mask_instance_term_scales_with_canvas():
    a = flop_model("mask", 32, 32, 7, 5, 16, 4)["instance_attn"]
    b = flop_model("mask", 64, 64, 7, 5, 16, 4)["instance_attn"]
    assert b == 4 * a


def test_flop_model_attention_ratio_equals_r2_over_hw():
    # Derived identity: with attn() proportional to query count, the per-
    # instance attention ratio between the paths is exactly r^2 / (h*w).
    h = w = 128
    r, n, c, L = 25, 25, 64, 4
    roi = flop_model("roi", h, w, r, n, c, L)["instance_attn"]
    mask_attn = n * attention_flops(h * w, L, c)
    assert roi / mask_attn == (r * r) / (h * w)


def test_flop_model_validation():
    with pytest.raises(ValueError):
        flop_model("mask", 0, 32, 7, 1, 16, 4)
    with pytest.raises(ValueError, match="unknown path"):
        flop_model("banana", 32, 32, 7, 1, 16, 4)


def test_measure_returns_both_paths():
    reports = measure(BenchConfig(h=16, w=16, r=5, n=2, c=8, L=2), repeats=2, warmup=1)
    assert [r.path for r in reports] == ["mask", "roi"]
    for rep in reports:
        assert rep.ns_median > 0 and rep.bytes_peak > 0 and rep.flops_analytic > 0


def test_cost_report_row_shape():
    rep = CostReport("roi", BenchConfig(h=16, w=16), 123.0, 456.0, 789)
    row = rep.as_row()
    assert row[0] == "roi" and row[-1] == 789 and len(row) == 10


def test_run_bench_writes_csv_and_skips_over_budget(tmp_path):
    out = tmp_path / "bench.csv"
    configs = [BenchConfig(h=16, w=16, r=5, n=2, c=8, L=2),
               BenchConfig(h=4096, w=4096, r=5, n=25, c=64, L=2)]
    reports = run_bench(configs, out_csv=str(out), repeats=1,
                        budget_elements=1 << 20)
    assert len(reports) == 2  # only the small config ran, two paths
    lines = out.read_text().splitlines()
    assert lines[0].startswith("#")
    rows = list(csv.reader(lines[1:]))
    assert rows[0][0] == "path"
    assert rows[-1][0] == "skipped"


def test_measured_roi_advantage_grows_with_canvas():
    # The headline scaling claim at miniature size: the crop path's relative
    # cost shrinks as the canvas grows, since its attention term is constant.
    small = {r.path: r.ns_median for r in
             measure(BenchConfig(h=16, w=16, r=5, n=4, c=8, L=2), repeats=3)}
    large = {r.path: r.ns_median for r in
             measure(BenchConfig(h=48, w=48, r=5, n=4, c=8, L=2), repeats=3)}
    ratio_small = small["roi"] / small["mask"]
    ratio_large = large["roi"] / large["mask"]
    assert ratio_large < ratio_small
