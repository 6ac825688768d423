"""Linear-beta diffusion schedule and strided deterministic sampling."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import torch

from .errors import InvalidArgumentError


@dataclass
class DiffusionSchedule:
    timesteps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    betas: np.ndarray = field(init=False, repr=False)
    alphas: np.ndarray = field(init=False, repr=False)
    alphas_cumprod: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if not 0.0 < self.beta_start < self.beta_end < 1.0:
            raise InvalidArgumentError("need 0 < beta_start < beta_end < 1")
        if self.timesteps < 1:
            raise InvalidArgumentError("timesteps must be >= 1")
        self.betas = np.linspace(self.beta_start, self.beta_end, self.timesteps, dtype=np.float64)
        self.alphas = 1.0 - self.betas
        self.alphas_cumprod = np.cumprod(self.alphas)

    def to_dict(self) -> dict:
        return {"timesteps": self.timesteps, "beta_start": self.beta_start, "beta_end": self.beta_end}

    def q_sample(self, x0: torch.Tensor, t: torch.Tensor, noise: torch.Tensor) -> torch.Tensor:
        ab = torch.as_tensor(self.alphas_cumprod, dtype=x0.dtype, device=x0.device)[t]
        ab = ab.view(-1, *([1] * (x0.ndim - 1)))
        return ab.sqrt() * x0 + (1 - ab).sqrt() * noise

    def strided_timesteps(self, num_steps: int) -> np.ndarray:
        """``num_steps`` evenly spaced timesteps from T-1 down to 0."""
        if not 1 <= num_steps <= self.timesteps:
            raise InvalidArgumentError(f"num_steps must lie in [1, {self.timesteps}], got {num_steps}")
        return np.unique(np.round(np.linspace(self.timesteps - 1, 0, num_steps)).astype(np.int64))[::-1]


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float32, device=t.device) / half)
    args = t.float()[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[:, :1])], dim=-1)
    return emb


@torch.no_grad()
def sample_x0(
    predict_x0: Callable[[torch.Tensor, torch.Tensor], torch.Tensor],
    schedule: DiffusionSchedule,
    shape,
    num_steps: int,
    generator: Optional[torch.Generator] = None,
    clip: float = 1.0,
) -> torch.Tensor:
    """Deterministic (eta = 0) strided sampler for an x0-predicting denoiser.

    Starts from seeded Gaussian noise at t = T-1 and walks the strided
    timesteps; the result is the final clean-image prediction.
    """
    x = torch.randn(shape, generator=generator)
    steps = schedule.strided_timesteps(num_steps)
    ab = schedule.alphas_cumprod
    x0 = x
    for i, t in enumerate(steps):
        tt = torch.full((shape[0],), int(t), dtype=torch.int64)
        x0 = predict_x0(x, tt).clamp(-clip, clip)
        if i + 1 == len(steps):
            break
        a_t, a_next = float(ab[t]), float(ab[steps[i + 1]])
        eps = (x - math.sqrt(a_t) * x0) / math.sqrt(1.0 - a_t)
        x = math.sqrt(a_next) * x0 + math.sqrt(1.0 - a_next) * eps
    return x0
