"""Desk-scale denoiser with instance adapters at two feature resolutions.

The backbone is a tiny three-level conv UNet (full resolution plus 2x and
4x downsamples). The two lower levels each carry an adapter that injects
the global caption through cross-attention and the instance captions
through the crop path (align -> shared cross-attention -> per-instance
self-attention -> unpool), fuses the outputs with learnable blending, then
applies box-embedding guidance. The same cross-attention weight set serves
both caption paths at a given site, so there are no instance-specific
projections. Keeping the adapters off the full-resolution level bounds the
attention cost without losing the multi-scale ROI schedule.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import math
import numpy as np

from . import tensor as T
from .attention import (BoxGuidanceParams, CrossAttnParams, RoiSelfAttnParams,
                        cross_attention, roi_self_attention, spatial_to_tokens,
                        tokens_to_spatial)
from .blend import learnable_blend, reg_loss
from .precision import dtype
from .roi_ops import RoiBoxBatch, foreground_mask, roi_align, roi_unpool
from .scenes import VOCAB_SIZE
from .schedule import NoiseSchedule
from .tensor import Tensor

CHECKPOINT_MAGIC = b"ROICTRL1"


@dataclass(frozen=True)
class Ablations:
    no_self_attn: bool = False
    no_reg: bool = False          # handled by the training loop (alpha = 0)
    local_coord: bool = False
    single_scale: bool = False

    @classmethod
    def from_names(cls, names) -> "Ablations":
        known = {"no-self-attn": "no_self_attn", "no-reg": "no_reg",
                 "local-coord": "local_coord", "single-scale": "single_scale"}
        kwargs = {}
        for name in names:
            if name not in known:
                raise ValueError(f"unknown ablation {name!r}, expected one of {sorted(known)}")
            kwargs[known[name]] = True
        return cls(**kwargs)


def roi_size(feature_side: int, single_scale: bool = False) -> int:
    """ROI grid side for a feature map of side R: r = 6*log2(R) - 11."""
    if feature_side < 4:
        raise ValueError(f"feature side must be >= 4, got {feature_side}")
    if single_scale:
        return 7
    return max(1, int(round(6.0 * math.log2(feature_side) - 11.0)))


@dataclass
class ModelConfig:
    image_size: int = 64
    channels0: int = 16        # full-resolution width (no adapter)
    channels1: int = 32        # half-resolution width (adapter site 0)
    channels2: int = 48        # quarter-resolution width (adapter site 1)
    caption_dim: int = 32
    time_dim: int = 32
    schedule_steps: int = 1000   # must match the trainer/sampler schedule
    ablations: Ablations = field(default_factory=Ablations)

    def site_plan(self) -> Tuple[Tuple[int, int, int], ...]:
        """(feature side, channels, roi side) for each adapter site."""
        single = self.ablations.single_scale
        return ((self.image_size // 2, self.channels1,
                 roi_size(self.image_size // 2, single)),
                (self.image_size // 4, self.channels2,
                 roi_size(self.image_size // 4, single)))


class Denoiser:
    """Parameter container + forward pass. All state lives in ``self.params``."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.noise = NoiseSchedule(steps=cfg.schedule_steps)
        self.params: Dict[str, Tensor] = {}
        self._build(rng)

    # -- construction -------------------------------------------------------

    def _w(self, name: str, shape, fan_in: float, rng, zero: bool = False) -> Tensor:
        arr = np.zeros(shape) if zero else rng.standard_normal(shape) / math.sqrt(fan_in)
        t = T.tensor(arr, requires_grad=True)
        self.params[name] = t
        return t

    def _conv(self, name: str, cout: int, cin: int, k: int, rng) -> None:
        self._w(f"{name}.w", (cout, cin, k, k), cin * k * k, rng)
        self._w(f"{name}.b", (cout,), 1, rng, zero=True)

    def _build(self, rng) -> None:
        cfg = self.cfg
        c0, c1, c2 = cfg.channels0, cfg.channels1, cfg.channels2
        d, td = cfg.caption_dim, cfg.time_dim
        self._w("embed.table", (VOCAB_SIZE, d), d, rng)
        self._w("time.w1", (td, td), td, rng)
        self._w("time.b1", (td,), 1, rng, zero=True)
        self._w("time.w0", (td, c0), td, rng)
        self._w("time.w1p", (td, c1), td, rng)
        self._w("time.w2p", (td, c2), td, rng)
        self._conv("stem", c0, 3, 3, rng)
        self._conv("res0.c1", c0, c0, 3, rng)
        self._conv("res0.c2", c0, c0, 3, rng)
        self._conv("down0", c1, c0, 3, rng)
        self._conv("res1.c1", c1, c1, 3, rng)
        self._conv("res1.c2", c1, c1, 3, rng)
        self._conv("down1", c2, c1, 3, rng)
        self._conv("res2.c1", c2, c2, 3, rng)
        self._conv("res2.c2", c2, c2, 3, rng)
        self._conv("up1", c1, c2, 3, rng)
        self._conv("res3.c1", c1, c1, 3, rng)
        self._conv("res3.c2", c1, c1, 3, rng)
        self._conv("up0", c0, c1, 3, rng)
        self._conv("res4.c1", c0, c0, 3, rng)
        self._conv("res4.c2", c0, c0, 3, rng)
        self._conv("out", 3, c0, 3, rng)
        self.sites = []
        for s, (side, c, r) in enumerate(cfg.site_plan()):
            prefix = f"site{s}"
            cross = CrossAttnParams.init(c, d, c, rng)
            self.params.update(cross.named(f"{prefix}.cross"))
            self_attn = None
            if not cfg.ablations.no_self_attn:
                self_attn = RoiSelfAttnParams.init(c, r, rng)
                self.params.update(self_attn.named(f"{prefix}.selfattn"))
            guide = BoxGuidanceParams.init(c, rng)
            self.params.update(guide.named(f"{prefix}.guide"))
            blend_w = self._w(f"{prefix}.blend.w", (1, c), c, rng)
            blend_b = self._w(f"{prefix}.blend.b", (1,), 1, rng, zero=True)
            self.sites.append({"cross": cross, "self_attn": self_attn,
                               "guide": guide, "blend_w": blend_w,
                               "blend_b": blend_b, "r": r, "side": side})

    # -- forward ------------------------------------------------------------

    def _time_features(self, t: np.ndarray) -> Tensor:
        td = self.cfg.time_dim
        half = td // 2
        freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
        ang = t.astype(np.float64)[:, None] * freqs[None, :]
        emb = np.concatenate([np.sin(ang), np.cos(ang)], axis=1).astype(dtype())
        h = T.silu(T.add(T.matmul(T.tensor(emb), self.params["time.w1"]),
                         self.params["time.b1"]))
        return h

    def _resblock(self, name: str, h: Tensor, tvec: Tensor) -> Tensor:
        b = h.shape[0]
        tb = T.reshape(tvec, (b, tvec.shape[1], 1, 1))
        u = T.layer_norm(h, axis=1)
        u = T.conv2d(T.silu(T.add(u, tb)),
                     self.params[f"{name}.c1.w"], self.params[f"{name}.c1.b"])
        u = T.conv2d(T.silu(u), self.params[f"{name}.c2.w"], self.params[f"{name}.c2.b"])
        return T.add(h, u)

    def _adapter(self, site_idx: int, h: Tensor, boxes: RoiBoxBatch,
                 inst_tokens: Tensor, global_tokens: Tensor
                 ) -> Tuple[Tensor, Tensor]:
        site = self.sites[site_idx]
        b, c, hh, ww = h.shape
        n = boxes.n_slots
        r = site["r"]
        tokens = T.layer_norm(spatial_to_tokens(h), axis=-1)
        normed = tokens_to_spatial(tokens, hh, ww)

        a_g = tokens_to_spatial(cross_attention(tokens, global_tokens, site["cross"]),
                                hh, ww)

        roi = roi_align(normed, boxes, r)                                # (b,n,c,r,r)
        flat = T.reshape(T.moveaxis(T.reshape(roi, (b * n, c, r * r)), 1, 2),
                         (b * n, r * r, c))
        Lr = inst_tokens.shape[2]
        inst_flat = T.reshape(inst_tokens, (b * n, Lr, inst_tokens.shape[3]))
        refined = cross_attention(flat, inst_flat, site["cross"])
        refined = T.reshape(T.moveaxis(refined, 1, 2), (b, n, c, r, r))
        if site["self_attn"] is not None:
            refined = roi_self_attention(refined, site["self_attn"])
        a_r, occupancy = roi_unpool(refined, boxes, hh, ww)

        fused, weights, _ = learnable_blend(a_g, a_r, occupancy, boxes.valid,
                                            site["blend_w"], site["blend_b"])
        reg = reg_loss(weights, foreground_mask(occupancy, boxes.valid))
        fused = self._box_guided(fused, boxes, site)
        return T.add(h, fused), reg

    def _box_guided(self, fused, boxes, site):
        from .attention import box_guidance
        return box_guidance(fused, boxes, site["guide"],
                            local_frame=self.cfg.ablations.local_coord)

    def forward(self, z: np.ndarray, t: np.ndarray, boxes: RoiBoxBatch,
                inst_ids: np.ndarray, global_ids: np.ndarray
                ) -> Tuple[Tensor, Tensor]:
        """Predict noise for (b,3,H,W) latents; returns (eps_hat, blend reg)."""
        p = self.params
        table = p["embed.table"]
        global_tokens = T.gather_rows(table, global_ids[:, None])   # (b, 1, d)
        inst_tokens = T.gather_rows(table, inst_ids)                # (b, n, 2, d)
        temb = self._time_features(t)
        t0 = T.matmul(temb, p["time.w0"])
        t1 = T.matmul(temb, p["time.w1p"])
        t2 = T.matmul(temb, p["time.w2p"])

        h = T.conv2d(T.tensor(z.astype(dtype())), p["stem.w"], p["stem.b"])
        h = self._resblock("res0", h, t0)
        skip0 = h
        h = T.conv2d(h, p["down0.w"], p["down0.b"], stride=2)
        h = self._resblock("res1", h, t1)
        h, reg0 = self._adapter(0, h, boxes, inst_tokens, global_tokens)
        skip1 = h
        h = T.conv2d(h, p["down1.w"], p["down1.b"], stride=2)
        h = self._resblock("res2", h, t2)
        h, reg1 = self._adapter(1, h, boxes, inst_tokens, global_tokens)
        h = T.conv2d(T.upsample2(h), p["up1.w"], p["up1.b"])
        h = T.add(h, skip1)
        h = self._resblock("res3", h, t1)
        h = T.conv2d(T.upsample2(h), p["up0.w"], p["up0.b"])
        h = T.add(h, skip0)
        h = self._resblock("res4", h, t0)
        v_hat = T.conv2d(T.silu(T.layer_norm(h, axis=1)), p["out.w"], p["out.b"])
        # The head predicts the velocity v = sqrt(ab) eps - sqrt(1-ab) x0 and
        # the noise estimate is recomposed as eps = sqrt(1-ab) z + sqrt(ab) v.
        # The sampler's x0 estimate then reduces to the head's bounded direct
        # prediction instead of an amplified eps residual at high t.
        ab = self.noise.alpha_bar(t).reshape(-1, 1, 1, 1)
        base = (np.sqrt(1.0 - ab) * z).astype(dtype())
        c_v = np.sqrt(ab).astype(dtype())
        eps = T.add(T.tensor(base), T.mul(v_hat, T.tensor(c_v)))
        reg = T.scale(T.add(reg0, reg1), 0.5)
        return eps, reg

    # -- parameter plumbing --------------------------------------------------

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.zero_grad()

    def n_params(self) -> int:
        return sum(t.data.size for t in self.params.values())

    def load_state(self, state: Dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        extra = set(state) - set(self.params)
        if missing or extra:
            raise ValueError(f"checkpoint mismatch: missing={sorted(missing)}, "
                             f"unexpected={sorted(extra)}")
        for name, arr in state.items():
            if tuple(arr.shape) != self.params[name].shape:
                raise ValueError(f"shape mismatch for {name}: "
                                 f"{arr.shape} vs {self.params[name].shape}")
            self.params[name].data = arr.astype(self.params[name].data.dtype)


# ---------------------------------------------------------------------------
# checkpoint container: magic, little-endian extents, raw buffers per name
# ---------------------------------------------------------------------------

_DTYPE_CODES = {4: np.dtype("<f4"), 8: np.dtype("<f8")}


def save_checkpoint(path, params: Dict[str, Tensor]) -> None:
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(params)))
        for name in sorted(params):
            data = np.ascontiguousarray(params[name].data)
            code = data.dtype.itemsize
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<BB", code, data.ndim))
            for extent in data.shape:
                fh.write(struct.pack("<I", extent))
            fh.write(data.astype(_DTYPE_CODES[code]).tobytes())


def load_checkpoint(path) -> Dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"not a checkpoint file: bad magic {magic!r}")
        (count,) = struct.unpack("<I", fh.read(4))
        out: Dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<H", fh.read(2))
            name = fh.read(nlen).decode("utf-8")
            code, rank = struct.unpack("<BB", fh.read(2))
            shape = tuple(struct.unpack("<I", fh.read(4))[0] for _ in range(rank))
            dt = _DTYPE_CODES[code]
            n_bytes = int(np.prod(shape)) * dt.itemsize if shape else dt.itemsize
            arr = np.frombuffer(fh.read(n_bytes), dtype=dt).reshape(shape)
            out[name] = arr.copy()
    return out
