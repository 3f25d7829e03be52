"""Noise-prediction training loop.

The loss is the plain mean-squared error between the model output and the
Gaussian noise that produced the diffused input. ``denoising_loss`` is kept
free of randomness so gradient checks can drive it with fixed timesteps and
noise; ``train_step`` owns the sampling.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from ..registry import DatasetManifest
from .schedule import NoiseSchedule
from .unet import DenoiserModel


class TrainingDiverged(RuntimeError):
    """Raised when the loss stops being finite; training must not continue."""


@dataclass
class Batch:
    images: torch.Tensor          # (B, C, H, W), values in [-1, 1]
    class_ids: torch.Tensor       # (B,)
    attribute_ids: torch.Tensor | None  # (B, k) or None when k == 0
    patch_ids: tuple[str, ...]


@dataclass(frozen=True)
class TrainingConfig:
    steps: int
    batch_size: int
    lr: float
    seed: int = 0
    log_every: int = 100


# Reference configuration for a full-size run on real hardware. The toy
# studies in this repository use far smaller budgets.
FULL_SCALE_TRAINING = TrainingConfig(
    steps=800_000, batch_size=64, lr=1e-4, log_every=1000,
)


class ImageBatchLoader:
    """Holds a dataset in RAM and serves uniformly sampled batches."""

    def __init__(self, images: torch.Tensor, class_ids: torch.Tensor,
                 attribute_ids: torch.Tensor | None,
                 patch_ids: tuple[str, ...]):
        if images.ndim != 4:
            raise ValueError("images must be (N, C, H, W)")
        n = images.shape[0]
        if class_ids.shape != (n,):
            raise ValueError("class_ids must align with images")
        if attribute_ids is not None and attribute_ids.shape[0] != n:
            raise ValueError("attribute_ids must align with images")
        if len(patch_ids) != n:
            raise ValueError("patch_ids must align with images")
        self.images = images
        self.class_ids = class_ids
        self.attribute_ids = attribute_ids
        self.patch_ids = patch_ids

    @classmethod
    def from_manifest(cls, manifest: DatasetManifest, image_root: str | Path,
                      attributes: tuple[str, ...] = ()) -> "ImageBatchLoader":
        """Decode every referenced image once; values scaled to [-1, 1]."""
        root = Path(image_root)
        schema = manifest.schema
        arrays, class_ids, attr_rows, patch_ids = [], [], [], []
        for record in manifest.records:
            with Image.open(root / record.image_ref) as img:
                arr = np.asarray(img.convert("RGB"), dtype=np.float32)
            arrays.append(arr / 127.5 - 1.0)
            class_ids.append(schema.class_vocab.id_of(record.class_label))
            attr_rows.append([
                schema.vocab(a).id_of(record.attribute(a)) for a in attributes
            ])
            patch_ids.append(record.patch_id)
        if not arrays:
            raise ValueError("manifest has no records to load")
        images = torch.from_numpy(np.stack(arrays)).permute(0, 3, 1, 2).contiguous()
        attribute_ids = (
            torch.tensor(attr_rows, dtype=torch.long) if attributes else None
        )
        return cls(
            images=images,
            class_ids=torch.tensor(class_ids, dtype=torch.long),
            attribute_ids=attribute_ids,
            patch_ids=tuple(patch_ids),
        )

    def __len__(self) -> int:
        return self.images.shape[0]

    def batch(self, batch_size: int, generator: torch.Generator) -> Batch:
        idx = torch.randint(0, len(self), (batch_size,), generator=generator)
        return Batch(
            images=self.images[idx],
            class_ids=self.class_ids[idx],
            attribute_ids=(
                self.attribute_ids[idx] if self.attribute_ids is not None else None
            ),
            patch_ids=tuple(self.patch_ids[i] for i in idx.tolist()),
        )


def denoising_loss(model: DenoiserModel, schedule: NoiseSchedule, batch: Batch,
                   t: torch.Tensor, noise: torch.Tensor) -> torch.Tensor:
    """MSE between predicted and true noise at the given timesteps."""
    x_t = schedule.forward_diffuse(batch.images, t, noise)
    pred = model(x_t, t, batch.class_ids, batch.attribute_ids)
    return F.mse_loss(pred, noise)


def train_step(model: DenoiserModel, optimizer: torch.optim.Optimizer,
               schedule: NoiseSchedule, batch: Batch, *,
               generator: torch.Generator, step: int = 0) -> float:
    t = torch.randint(1, schedule.num_steps + 1, (batch.images.shape[0],),
                      generator=generator)
    noise = torch.randn(batch.images.shape, generator=generator)
    loss = denoising_loss(model, schedule, batch, t, noise)
    if not bool(torch.isfinite(loss)):
        lr = optimizer.param_groups[0]["lr"]
        shown = ", ".join(batch.patch_ids[:8])
        raise TrainingDiverged(
            f"non-finite loss at step {step} (lr={lr}); batch patch ids: {shown}"
        )
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()
    return float(loss.item())


def train_model(model: DenoiserModel, loader: ImageBatchLoader,
                schedule: NoiseSchedule, config: TrainingConfig,
                *, callback=None) -> list[dict]:
    """Run the full loop; returns logged (step, loss) pairs."""
    optimizer = torch.optim.Adam(model.parameters(), lr=config.lr)
    generator = torch.Generator().manual_seed(config.seed)
    history: list[dict] = []
    model.train()
    for step in range(1, config.steps + 1):
        batch = loader.batch(config.batch_size, generator)
        loss = train_step(model, optimizer, schedule, batch,
                          generator=generator, step=step)
        if step % config.log_every == 0 or step == config.steps:
            history.append({"step": step, "loss": loss})
            if callback is not None:
                callback(step, loss)
    return history


__all__ = [
    "Batch",
    "FULL_SCALE_TRAINING",
    "ImageBatchLoader",
    "TrainingConfig",
    "TrainingDiverged",
    "denoising_loss",
    "train_model",
    "train_step",
]
