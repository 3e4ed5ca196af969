import os
from roikit.diffusion import TrainConfig, train
from roikit.cli import run_eval, EVAL_SCHEMA
out = "runs/acceptance/c7_default"
cfg = TrainConfig(out_dir=out)   # defaults: 5000 steps, seed 0
train(cfg)
ev = {k: v for k, (_, v) in EVAL_SCHEMA.items()}
run_eval(os.path.join(out, "checkpoint.bin"), out, ev, [])
print("c7 done")
