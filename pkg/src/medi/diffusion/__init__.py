"""Conditional denoising diffusion: schedule, conditioning, model, training,
checkpointing, and deterministic sampling."""

from .conditioning import ConditioningSpec, EmbeddingTables, build_conditioning
from .schedule import NoiseSchedule
from .unet import DenoiserModel
from .training import (
    FULL_SCALE_TRAINING,
    ImageBatchLoader,
    TrainingConfig,
    TrainingDiverged,
    denoising_loss,
    train_model,
    train_step,
)
from .checkpoint import load_checkpoint, save_checkpoint
from .ddim import ddim_sample, ddim_timesteps

__all__ = [
    "ConditioningSpec",
    "EmbeddingTables",
    "build_conditioning",
    "NoiseSchedule",
    "DenoiserModel",
    "FULL_SCALE_TRAINING",
    "ImageBatchLoader",
    "TrainingConfig",
    "TrainingDiverged",
    "denoising_loss",
    "train_model",
    "train_step",
    "load_checkpoint",
    "save_checkpoint",
    "ddim_sample",
    "ddim_timesteps",
]
