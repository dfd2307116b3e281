"""Noise schedule and the forward (noising) process."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import InvalidArgument


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear-beta diffusion schedule with cached cumulative products."""

    num_train_steps: int
    betas: np.ndarray
    alpha_bars: np.ndarray = field(default=None)

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64)
        if betas.shape != (self.num_train_steps,):
            raise InvalidArgument("betas length must equal num_train_steps")
        if np.any(betas <= 0.0) or np.any(betas >= 1.0):
            raise InvalidArgument("betas must lie in (0, 1)")
        bars = np.cumprod(1.0 - betas)
        if np.any(np.diff(bars) >= 0.0):
            raise InvalidArgument("alpha_bars must be strictly decreasing")
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alpha_bars", bars)

    @classmethod
    def linear(cls, num_train_steps: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> "NoiseSchedule":
        betas = np.linspace(beta_start, beta_end, num_train_steps)
        return cls(num_train_steps=num_train_steps, betas=betas)

    def check_t(self, t: int):
        if not (0 <= int(t) < self.num_train_steps):
            raise InvalidArgument(f"timestep {t} outside [0, {self.num_train_steps})")


def diffuse_with_abar(x0, eps, abar: float):
    """sqrt(abar) * x0 + sqrt(1 - abar) * eps, elementwise."""
    return np.sqrt(abar) * x0 + np.sqrt(1.0 - abar) * eps


def forward_diffuse(x0: np.ndarray, t: int, eps: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    """Noised state at step t of the forward process."""
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise InvalidArgument(f"shape mismatch: x0 {x0.shape} vs eps {eps.shape}")
    schedule.check_t(t)
    return diffuse_with_abar(x0, eps, schedule.alpha_bars[int(t)])
