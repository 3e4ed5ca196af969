"""Single entry point: verification, benchmarking, training, evaluation, demo.

Exit codes: 0 success, 1 invariant failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import csv
import os
import sys
from typing import Dict, List, Optional

import numpy as np

from .config import ConfigError, echo_config, read_config_file, resolve
from .precision import set_precision

EXIT_OK, EXIT_INVARIANT, EXIT_USAGE = 0, 1, 2


def _limit_threads(n: Optional[int]) -> None:
    if n is None:
        return
    os.environ.setdefault("OMP_NUM_THREADS", str(n))
    try:
        import threadpoolctl
        threadpoolctl.threadpool_limits(limits=n)
    except ImportError:
        pass


def _load_file_values(path: Optional[str]) -> Dict[str, str]:
    if path is None:
        return {}
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    return read_config_file(path)


def cmd_verify(args) -> int:
    from . import verify
    results = verify.run_all(name_filter=args.filter)
    if not results:
        print(f"no checks match filter {args.filter!r}", file=sys.stderr)
        return EXIT_USAGE
    width = max(len(name) for name, _, _ in results)
    failed = []
    for name, ok, detail in results:
        print(f"{name:<{width}}  {'PASS' if ok else 'FAIL'}  {detail}")
        if not ok:
            failed.append(name)
    if failed:
        print(f"failed invariants: {', '.join(failed)}", file=sys.stderr)
        return EXIT_INVARIANT
    return EXIT_OK


TRAIN_SCHEMA = {
    "image_size": (int, 64),
    "steps": (int, 5000),
    "batch_size": (int, 8),
    "lr": (float, 2e-3),
    "alpha": (float, 0.01),
    "schedule_steps": (int, 1000),
    "n_min": (int, 1),
    "n_max": (int, 6),
    "capacity": (int, 6),
    "log_every": (int, 25),
    "warmup": (int, 100),
    "lr_floor": (float, 0.1),
    "ema_decay": (float, 0.999),
    "seed": (int, 0),
}


def cmd_train(args) -> int:
    from .diffusion import TrainConfig, train
    from .model import Ablations
    cfg = resolve(TRAIN_SCHEMA, _load_file_values(args.config),
                  {"seed": args.seed})
    ablations = Ablations.from_names(args.ablate or [])
    echo = dict(cfg)
    echo["ablate"] = ",".join(args.ablate or [])
    echo_config(echo, args.out)
    tc = TrainConfig(out_dir=args.out, ablations=ablations,
                     **{k: v for k, v in cfg.items()})
    train(tc)
    print(f"checkpoint and metrics written to {args.out}")
    return EXIT_OK


EVAL_SCHEMA = {
    "image_size": (int, 64),
    "scenes": (int, 200),
    "ddim_steps": (int, 50),
    "sample_batch": (int, 25),
    "n_min": (int, 1),
    "n_max": (int, 6),
    "schedule_steps": (int, 1000),
    "seed": (int, 10_000),
}

EVAL_HEADER = ["track", "n_instances", "size_bucket", "mIoU",
               "acc_color", "acc_shape", "success_rate"]


def run_eval(checkpoint: str, out_dir: str, cfg: dict, ablate: List[str]):
    """Sample held-out scenes from a fixed seed and score them."""
    from .diffusion import NoiseSchedule, ddim_sample
    from .evaluate import bench_metrics
    from .model import Ablations, Denoiser, ModelConfig, load_checkpoint
    from .scenes import LayoutSpec, scenes_to_batch, synth_scene

    state = load_checkpoint(checkpoint)
    ablations = Ablations.from_names(ablate)
    if not any(k.startswith("site0.selfattn") for k in state):
        ablations = Ablations(no_self_attn=True, no_reg=ablations.no_reg,
                              local_coord=ablations.local_coord,
                              single_scale=ablations.single_scale)
    rng = np.random.default_rng(cfg["seed"])
    model = Denoiser(ModelConfig(image_size=cfg["image_size"],
                                 schedule_steps=cfg["schedule_steps"],
                                 ablations=ablations), rng)
    model.load_state(state)
    schedule = NoiseSchedule(steps=cfg["schedule_steps"])
    layout = LayoutSpec(height=cfg["image_size"], width=cfg["image_size"],
                        n_min=cfg["n_min"], n_max=cfg["n_max"],
                        max_pair_iou=0.1)
    scenes = [synth_scene(rng, layout) for _ in range(cfg["scenes"])]
    images = []
    bs = cfg["sample_batch"]
    for i in range(0, len(scenes), bs):
        chunk = scenes[i:i + bs]
        _, boxes, inst, glob = scenes_to_batch(chunk, capacity=cfg["n_max"])
        out = ddim_sample(model, boxes, inst, glob, schedule,
                          steps=cfg["ddim_steps"], seed=cfg["seed"] + i)
        images.extend(out)
    rows = []
    overall = bench_metrics(scenes, images)
    rows.append(["synthetic", "all", "all"] + _metric_cells(overall))
    for bucket in ("small", "large"):
        m = bench_metrics(scenes, images, size_bucket=bucket)
        rows.append(["synthetic", "all", bucket] + _metric_cells(m))
    for n in range(cfg["n_min"], cfg["n_max"] + 1):
        subset = [(s, im) for s, im in zip(scenes, images) if s.n == n]
        if not subset:
            continue
        m = bench_metrics([s for s, _ in subset], [im for _, im in subset])
        rows.append(["synthetic", str(n), "all"] + _metric_cells(m))
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "eval_metrics.csv")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(EVAL_HEADER)
        writer.writerows(rows)
    return overall, path


def _metric_cells(m) -> list:
    return [f"{m.miou:.4f}", f"{m.acc_color:.4f}", f"{m.acc_shape:.4f}",
            f"{m.success_rate:.4f}"]


def cmd_eval(args) -> int:
    cfg = resolve(EVAL_SCHEMA, _load_file_values(args.config), {"seed": args.seed})
    if not os.path.exists(args.checkpoint):
        print(f"missing checkpoint: {args.checkpoint}", file=sys.stderr)
        return EXIT_USAGE
    echo = dict(cfg)
    echo["checkpoint"] = args.checkpoint
    echo_config(echo, args.out)
    overall, path = run_eval(args.checkpoint, args.out, cfg, args.ablate or [])
    print(f"mIoU={overall.miou:.4f} acc_color={overall.acc_color:.4f} "
          f"acc_shape={overall.acc_shape:.4f} -> {path}")
    return EXIT_OK


BENCH_SCHEMA = {
    "sizes": (str, "32,64,128,256"),
    "n": (int, 25),
    "r": (int, 25),
    "c": (int, 64),
    "L": (int, 4),
    "repeats": (int, 5),
    "seed": (int, 0),
}


def cmd_bench(args) -> int:
    from .bench import BenchConfig, run_bench
    cfg = resolve(BENCH_SCHEMA, _load_file_values(args.config), {"seed": args.seed})
    echo_config(cfg, args.out)
    sizes = [int(s) for s in cfg["sizes"].split(",")]
    grid = [BenchConfig(h=s, w=s, r=cfg["r"], n=cfg["n"], c=cfg["c"], L=cfg["L"])
            for s in sizes]
    path = os.path.join(args.out, "bench.csv")
    reports = run_bench(grid, seed=cfg["seed"], out_csv=path,
                        repeats=cfg["repeats"])
    for rep in reports:
        print(",".join(str(v) for v in rep.as_row()))
    print(f"report written to {path}")
    return EXIT_OK


DEMO_SCHEMA = {
    "image_size": (int, 64),
    "ddim_steps": (int, 50),
    "schedule_steps": (int, 1000),
    "seed": (int, 7),
}


def _demo_layouts(image_size: int):
    """Fixed gallery: grid scene, occlusion pair, and a 2x-wide layout."""
    from .roi_ops import RoiBox
    from .scenes import SHAPE_NAMES, ToyScene, rasterize
    gallery = []
    grid_boxes = [RoiBox(x, y, x + 0.28, y + 0.28)
                  for y in (0.05, 0.37, 0.69) for x in (0.05, 0.37, 0.69)]
    gallery.append(("grid", grid_boxes,
                    [i % 8 for i in range(9)], [i % 3 for i in range(9)], 1,
                    (image_size, image_size)))
    gallery.append(("occlusion",
                    [RoiBox(0.15, 0.2, 0.6, 0.8), RoiBox(0.4, 0.3, 0.85, 0.9)],
                    [2, 5], [0, 1], 0, (image_size, image_size)))
    gallery.append(("wide",
                    [RoiBox(0.05, 0.2, 0.3, 0.8), RoiBox(0.6, 0.2, 0.85, 0.8)],
                    [4, 6], [1, 2], 2, (image_size, image_size * 2)))
    return gallery


def cmd_demo(args) -> int:
    from .diffusion import NoiseSchedule, ddim_sample
    from .io_utils import write_ppm
    from .model import Ablations, Denoiser, ModelConfig, load_checkpoint
    from .roi_ops import RoiBoxBatch
    from .scenes import SHAPE_TOKEN_BASE, BACKGROUND_TOKEN_BASE
    cfg = resolve(DEMO_SCHEMA, _load_file_values(args.config), {"seed": args.seed})
    if not os.path.exists(args.checkpoint):
        print(f"missing checkpoint: {args.checkpoint}", file=sys.stderr)
        return EXIT_USAGE
    state = load_checkpoint(args.checkpoint)
    ablations = Ablations.from_names(args.ablate or [])
    if not any(k.startswith("site0.selfattn") for k in state):
        ablations = Ablations(no_self_attn=True, no_reg=ablations.no_reg,
                              local_coord=ablations.local_coord,
                              single_scale=ablations.single_scale)
    model = Denoiser(ModelConfig(image_size=cfg["image_size"],
                                 schedule_steps=cfg["schedule_steps"],
                                 ablations=ablations),
                     np.random.default_rng(0))
    model.load_state(state)
    schedule = NoiseSchedule(steps=cfg["schedule_steps"])
    os.makedirs(args.out, exist_ok=True)
    echo_config({**cfg, "checkpoint": args.checkpoint}, args.out)
    for name, boxes, colors, shapes, bg, (h, w) in _demo_layouts(cfg["image_size"]):
        batch = RoiBoxBatch.from_lists([boxes])
        inst = np.zeros((1, batch.n_slots, 2), dtype=np.int64)
        for i, (c, s) in enumerate(zip(colors, shapes)):
            inst[0, i] = (c, SHAPE_TOKEN_BASE + s)
        glob = np.array([BACKGROUND_TOKEN_BASE + bg], dtype=np.int64)
        image = ddim_sample(model, batch, inst, glob, schedule,
                            steps=cfg["ddim_steps"], seed=cfg["seed"],
                            image_size=(h, w))[0]
        write_ppm(os.path.join(args.out, f"{name}.ppm"), image)
    print(f"gallery written to {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="roikit",
        description="ROI instance-control toolkit: verify, bench, train, eval, demo")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_out=True):
        p.add_argument("--config", help="flat key=value config file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--threads", type=int, default=None)
        p.add_argument("--precision", choices=("f32", "f64"), default="f32")
        p.add_argument("--ablate", action="append", default=None,
                       choices=("no-self-attn", "no-reg", "local-coord", "single-scale"))
        if needs_out:
            p.add_argument("--out", required=True, help="output directory")

    p_verify = sub.add_parser("verify", help="run the oracle/invariant suite")
    p_verify.add_argument("--filter", default=None,
                          help="substring filter over check names (e.g. 'roi')")
    p_verify.add_argument("--threads", type=int, default=None)
    p_verify.set_defaults(fn=cmd_verify)

    p_train = sub.add_parser("train", help="train the toy denoiser")
    common(p_train)
    p_train.set_defaults(fn=cmd_train)

    p_eval = sub.add_parser("eval", help="sample held-out scenes and score them")
    common(p_eval)
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.set_defaults(fn=cmd_eval)

    p_bench = sub.add_parser("bench", help="mask-path vs crop-path cost comparison")
    common(p_bench)
    p_bench.set_defaults(fn=cmd_bench)

    p_demo = sub.add_parser("demo", help="generate the fixed scene gallery")
    common(p_demo)
    p_demo.add_argument("--checkpoint", required=True)
    p_demo.set_defaults(fn=cmd_demo)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    _limit_threads(getattr(args, "threads", None))
    if getattr(args, "precision", None):
        set_precision(args.precision)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
