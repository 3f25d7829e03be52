"""Deterministic strided sampling.

The reverse pass visits a decreasing subsequence of the training timesteps
and applies the noiseless update: reconstruct the clean image implied by the
current noise estimate, clip it to the valid range, then re-noise to the
next (smaller) timestep. With the variance term set to zero the whole
trajectory is a function of the initial draw, so fixed seeds give
byte-identical samples.
"""

from __future__ import annotations

import torch

from .schedule import NoiseSchedule
from .unet import DenoiserModel


class SamplingError(ValueError):
    pass


def ddim_timesteps(num_train_steps: int, num_sample_steps: int) -> list[int]:
    """Evenly strided visit order from T down to 0.

    Returns ``num_sample_steps`` positive timesteps (the first equals the
    training horizon) followed by the terminal 0.
    """
    if not 1 <= num_sample_steps <= num_train_steps:
        raise SamplingError(
            f"sample steps must lie in [1, {num_train_steps}], got "
            f"{num_sample_steps}"
        )
    taus = [round(num_train_steps * k / num_sample_steps)
            for k in range(num_sample_steps, 0, -1)]
    taus = sorted(set(taus), reverse=True)
    return taus + [0]


@torch.no_grad()
def ddim_sample(model: DenoiserModel, schedule: NoiseSchedule, *,
                class_ids: torch.Tensor,
                attribute_ids: torch.Tensor | None = None,
                num_sample_steps: int = 100,
                generator: torch.Generator | None = None,
                initial_noise: torch.Tensor | None = None,
                clip: bool = True) -> torch.Tensor:
    """Draw one batch of images, shaped like the model's training data.

    The trajectory is fully determined by the starting noise, which comes
    from ``initial_noise`` when given and from ``generator`` otherwise.
    Returns values in [-1, 1] when ``clip`` is set (the default).
    """
    n = class_ids.shape[0]
    shape = (n, model.in_channels, model.image_size, model.image_size)
    if initial_noise is not None:
        if initial_noise.shape != shape:
            raise SamplingError(
                f"initial noise shape {tuple(initial_noise.shape)} does not "
                f"match the expected {shape}"
            )
        x = initial_noise.clone()
    else:
        x = torch.randn(shape, generator=generator)
    taus = ddim_timesteps(schedule.num_steps, num_sample_steps)

    model.eval()
    for t_now, t_next in zip(taus[:-1], taus[1:]):
        t_batch = torch.full((n,), t_now, dtype=torch.long)
        eps = model(x, t_batch, class_ids, attribute_ids)
        ab_now = schedule.alpha_bars[t_now]
        ab_next = schedule.alpha_bars[t_next]
        x0 = (x - (1.0 - ab_now).sqrt() * eps) / ab_now.sqrt()
        if clip:
            x0 = x0.clamp(-1.0, 1.0)
        x = ab_next.sqrt() * x0 + (1.0 - ab_next).sqrt() * eps
    if clip:
        x = x.clamp(-1.0, 1.0)
    return x


def to_uint8(images: torch.Tensor) -> torch.Tensor:
    """Map [-1, 1] float images to (N, H, W, C) uint8 for encoding."""
    x = ((images.clamp(-1.0, 1.0) + 1.0) * 127.5).round().to(torch.uint8)
    return x.permute(0, 2, 3, 1).contiguous()


__all__ = ["SamplingError", "ddim_sample", "ddim_timesteps", "to_uint8"]
