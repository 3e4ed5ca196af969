"""Forward-process noise schedule, shared by the denoiser and the trainer."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class NoiseSchedule:
    """Linear-beta forward process."""
    steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02

    def __post_init__(self):
        self.betas = np.linspace(self.beta_start, self.beta_end, self.steps,
                                 dtype=np.float64)
        if not (np.all(self.betas > 0) and np.all(self.betas < 1)
                and np.all(np.diff(self.betas) > 0)):
            raise ValueError("betas must lie in (0,1) and increase strictly")
        self.alpha_bars = np.cumprod(1.0 - self.betas)

    def alpha_bar(self, t) -> np.ndarray:
        """alpha-bar at step(s) t; t = -1 means the clean endpoint (1.0)."""
        t = np.asarray(t)
        out = np.where(t < 0, 1.0, self.alpha_bars[np.clip(t, 0, self.steps - 1)])
        return out
