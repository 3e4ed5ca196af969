import os
from roikit.diffusion import TrainConfig, train
from roikit.model import Ablations
from roikit.cli import run_eval, EVAL_SCHEMA

VARIANTS = {
    "default": Ablations(),
    "no_self_attn": Ablations(no_self_attn=True),
    "no_reg": Ablations(no_reg=True),
}
for seed in (0, 1, 2):
    for name, ab in VARIANTS.items():
        out = f"runs/acceptance/c8_{name}_s{seed}"
        if os.path.exists(os.path.join(out, "eval_metrics.csv")):
            continue
        cfg = TrainConfig(steps=5000, seed=seed, ablations=ab, out_dir=out)
        train(cfg)
        ev = {k: v for k, (_, v) in EVAL_SCHEMA.items()}
        ev["scenes"] = 200
        run_eval(os.path.join(out, "checkpoint.bin"), out, ev, [])
        print(f"{out} done", flush=True)
print("c8 done")
