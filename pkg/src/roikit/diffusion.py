"""Noise schedule, forward process, training loop and DDIM sampler."""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field, asdict
from typing import Dict, List, Optional

import numpy as np

from . import tensor as T
from .blend import total_loss
from .model import Ablations, Denoiser, ModelConfig, save_checkpoint
from .precision import dtype
from .roi_ops import RoiBoxBatch
from .scenes import LayoutSpec, ToyScene, scenes_to_batch, synth_scene
from .tensor import Tensor


class TrainingDiverged(RuntimeError):
    pass


# re-exported so existing callers keep importing it from here
from .schedule import NoiseSchedule  # noqa: E402,F401


def q_sample(x0: np.ndarray, t: np.ndarray, eps: np.ndarray,
             schedule: NoiseSchedule) -> np.ndarray:
    """z_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps."""
    t = np.asarray(t)
    if np.any(t < 0) or np.any(t >= schedule.steps):
        raise ValueError(f"t out of range [0, {schedule.steps})")
    ab = schedule.alpha_bars[t][:, None, None, None]
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def ldm_loss(model: Denoiser, scenes: List[ToyScene], t: np.ndarray,
             eps: np.ndarray, schedule: NoiseSchedule,
             capacity: Optional[int] = None):
    """Standard noise-prediction MSE; returns (l_ldm, l_reg) tensors."""
    images, boxes, inst, glob = scenes_to_batch(scenes, capacity=capacity)
    z = q_sample(images, t, eps, schedule).astype(dtype())
    eps_hat, reg = model.forward(z, t, boxes, inst, glob)
    diff = T.sub(eps_hat, T.tensor(eps.astype(dtype())))
    return T.tmean(T.mul(diff, diff)), reg


def ddim_sample(model: Denoiser, boxes: RoiBoxBatch, inst_ids: np.ndarray,
                global_ids: np.ndarray, schedule: NoiseSchedule,
                steps: int = 50, seed: int = 0,
                image_size: Optional[tuple] = None) -> np.ndarray:
    """Deterministic (eta = 0) DDIM trajectory from pure seeded noise."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if schedule.steps != model.noise.steps:
        raise ValueError(f"schedule mismatch: sampler has {schedule.steps} "
                         f"steps, model was built for {model.noise.steps}")
    h, w = image_size or (model.cfg.image_size, model.cfg.image_size)
    b = boxes.batch
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((b, 3, h, w)).astype(dtype())
    ts = np.linspace(schedule.steps - 1, 0, steps).round().astype(np.int64)
    for i, t in enumerate(ts):
        t_arr = np.full(b, t, dtype=np.int64)
        eps_hat, _ = model.forward(z, t_arr, boxes, inst_ids, global_ids)
        eps_v = eps_hat.data
        ab = schedule.alpha_bar(t)
        t_prev = ts[i + 1] if i + 1 < len(ts) else -1
        ab_prev = schedule.alpha_bar(t_prev)
        x0 = (z - np.sqrt(1.0 - ab) * eps_v) / np.sqrt(ab)
        x0 = np.clip(x0, -1.0, 1.0)
        z = (np.sqrt(ab_prev) * x0 + np.sqrt(1.0 - ab_prev) * eps_v).astype(dtype())
    return x0.astype(np.float64)


class Adam:
    """Plain adaptive-moment optimizer over the model's parameter dict."""

    def __init__(self, params: Dict[str, Tensor], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v.data) for k, v in params.items()}
        self.v = {k: np.zeros_like(v.data) for k, v in params.items()}
        self.t = 0

    def step(self) -> None:
        self.t += 1
        b1t = 1.0 - self.b1 ** self.t
        b2t = 1.0 - self.b2 ** self.t
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            step_v = self.lr * (self.m[k] / b1t) / (np.sqrt(self.v[k] / b2t) + self.eps)
            p.data = (p.data - step_v).astype(p.data.dtype)


@dataclass
class TrainConfig:
    image_size: int = 64
    steps: int = 5000
    batch_size: int = 8
    lr: float = 2e-3
    alpha: float = 0.01          # blend-regularizer weight
    seed: int = 0
    schedule_steps: int = 1000
    n_min: int = 1
    n_max: int = 6
    capacity: int = 6
    log_every: int = 25
    warmup: int = 100            # linear lr warmup steps
    lr_floor: float = 0.1        # cosine decay endpoint as a fraction of lr
    ema_decay: float = 0.999     # checkpoint stores the EMA weights
    ablations: Ablations = field(default_factory=Ablations)
    out_dir: str = "runs/default"

    def layout(self) -> LayoutSpec:
        return LayoutSpec(height=self.image_size, width=self.image_size,
                          n_min=self.n_min, n_max=self.n_max)


def _lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup then cosine decay to cfg.lr_floor * cfg.lr."""
    scale = min(1.0, (step + 1) / max(cfg.warmup, 1))
    frac = step / max(cfg.steps - 1, 1)
    cos = 0.5 * (1.0 + np.cos(np.pi * frac))
    return cfg.lr * scale * (cfg.lr_floor + (1.0 - cfg.lr_floor) * cos)


def _sample_timesteps(rng, schedule_steps: int, batch: int) -> np.ndarray:
    """Half uniform, half restricted to the noisier upper 3/4 of the chain.

    The conditional layout structure is decided at high noise levels, where
    a uniform-t stream spends too little of its gradient budget for short
    desk-scale runs; the mild bias speeds up layout formation without
    starving fine detail at low t.
    """
    t_uniform = rng.integers(0, schedule_steps, size=batch)
    t_high = rng.integers(schedule_steps // 4, schedule_steps, size=batch)
    pick_high = rng.random(batch) < 0.5
    return np.where(pick_high, t_high, t_uniform)


def train(cfg: TrainConfig, log_rows: Optional[list] = None) -> Denoiser:
    """Optimize the denoiser on a fixed-seed synthetic stream.

    Writes ``checkpoint.bin`` and ``metrics.csv`` (step,loss,l_ldm,l_reg)
    into cfg.out_dir. The checkpoint (and the returned model) carry the
    exponential moving average of the weights. With the no-reg ablation
    the regularizer is logged but excluded from gradients.
    """
    rng = np.random.default_rng(cfg.seed)
    mcfg = ModelConfig(image_size=cfg.image_size,
                       schedule_steps=cfg.schedule_steps,
                       ablations=cfg.ablations)
    model = Denoiser(mcfg, rng)
    schedule = NoiseSchedule(steps=cfg.schedule_steps)
    opt = Adam(model.params, lr=cfg.lr)
    ema = {k: p.data.astype(np.float64) for k, p in model.params.items()}
    layout = cfg.layout()
    os.makedirs(cfg.out_dir, exist_ok=True)
    csv_path = os.path.join(cfg.out_dir, "metrics.csv")
    alpha = 0.0 if cfg.ablations.no_reg else cfg.alpha
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss", "l_ldm", "l_reg"])
        for step in range(cfg.steps):
            scenes = [synth_scene(rng, layout) for _ in range(cfg.batch_size)]
            t = _sample_timesteps(rng, schedule.steps, cfg.batch_size)
            eps = rng.standard_normal(
                (cfg.batch_size, 3, cfg.image_size, cfg.image_size))
            l_ldm, l_reg = ldm_loss(model, scenes, t, eps, schedule,
                                    capacity=cfg.capacity)
            loss = total_loss(l_ldm, l_reg, alpha)
            if not np.isfinite(loss.item()):
                dump = os.path.join(cfg.out_dir, f"diverged_step{step}.npz")
                np.savez(dump, t=t, eps=eps,
                         images=np.stack([s.image for s in scenes]))
                raise TrainingDiverged(
                    f"non-finite loss at step {step}; offending batch in {dump}")
            model.zero_grad()
            loss.backward()
            opt.lr = _lr_at(step, cfg)
            opt.step()
            d = cfg.ema_decay
            for k, p in model.params.items():
                ema[k] = d * ema[k] + (1.0 - d) * p.data
            if step % cfg.log_every == 0 or step == cfg.steps - 1:
                row = [step, loss.item(), l_ldm.item(), l_reg.item()]
                writer.writerow(row)
                fh.flush()
                if log_rows is not None:
                    log_rows.append(row)
    for k, p in model.params.items():
        p.data = ema[k].astype(p.data.dtype)
    save_checkpoint(os.path.join(cfg.out_dir, "checkpoint.bin"), model.params)
    return model
