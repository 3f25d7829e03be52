"""Forward-process noise schedule.

The convention throughout is that timestep 0 is the clean image: the
cumulative signal coefficient at t=0 is exactly 1, and diffusion steps
t=1..T apply the per-step betas. Tensors returned by the schedule live on
CPU in float32; indexing helpers broadcast against image batches.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    """Variance schedule with cumulative products, indexed so t=0 is clean."""

    betas: torch.Tensor  # shape (T,), betas[i] is the step i+1 variance
    alpha_bars: torch.Tensor = field(init=False)  # shape (T+1,), alpha_bars[0] == 1

    def __post_init__(self) -> None:
        betas = self.betas
        if betas.ndim != 1 or betas.numel() == 0:
            raise ScheduleError("betas must be a non-empty 1-d tensor")
        if not bool((betas > 0).all() and (betas < 1).all()):
            raise ScheduleError("betas must lie strictly inside (0, 1)")
        if not bool((betas[1:] >= betas[:-1]).all()):
            raise ScheduleError("betas must be non-decreasing")
        alphas = 1.0 - betas.to(torch.float64)
        alpha_bars = torch.cat([
            torch.ones(1, dtype=torch.float64),
            torch.cumprod(alphas, dim=0),
        ]).to(torch.float32)
        object.__setattr__(self, "alpha_bars", alpha_bars)

    @classmethod
    def linear(cls, steps: int = 1000, beta_start: float = 1e-4,
               beta_end: float = 0.02) -> "NoiseSchedule":
        if steps < 1:
            raise ScheduleError(f"steps must be positive, got {steps}")
        return cls(betas=torch.linspace(beta_start, beta_end, steps))

    @property
    def num_steps(self) -> int:
        return self.betas.numel()

    def alpha_bar(self, t: torch.Tensor) -> torch.Tensor:
        """Cumulative signal fraction at integer timesteps ``t`` in [0, T]."""
        if bool((t < 0).any()) or bool((t > self.num_steps).any()):
            raise ScheduleError(
                f"timesteps must lie in [0, {self.num_steps}]"
            )
        return self.alpha_bars[t]

    def forward_diffuse(self, x0: torch.Tensor, t: torch.Tensor,
                        noise: torch.Tensor) -> torch.Tensor:
        """Sample x_t given x_0 and unit Gaussian noise, per-example t."""
        if noise.shape != x0.shape:
            raise ScheduleError(
                f"noise shape {tuple(noise.shape)} must match x0 {tuple(x0.shape)}"
            )
        ab = self.alpha_bar(t).view(-1, *([1] * (x0.ndim - 1)))
        return ab.sqrt() * x0 + (1.0 - ab).sqrt() * noise


__all__ = ["NoiseSchedule", "ScheduleError"]
