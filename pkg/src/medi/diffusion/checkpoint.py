"""Checkpoint save/load with compatibility guards.

A checkpoint carries everything needed to rebuild the model for sampling:
weights, conditioning spec, architecture hyperparameters, the beta schedule,
and a fingerprint of the metadata schema the model was trained against.
Loading against a different schema is refused outright, since embedding ids
would silently point at the wrong vocabulary entries.
"""

from __future__ import annotations

from pathlib import Path

import torch

from ..registry import MetadataSchema
from .conditioning import ConditioningSpec
from .schedule import NoiseSchedule
from .unet import DenoiserModel


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(path: str | Path, model: DenoiserModel,
                    schedule: NoiseSchedule, schema: MetadataSchema, *,
                    step: int, extra: dict | None = None) -> None:
    payload = {
        "state_dict": model.state_dict(),
        "conditioning": model.spec.to_dict(),
        "hparams": model.hparams,
        "betas": schedule.betas,
        "schema_fingerprint": schema.fingerprint(),
        "step": step,
        "extra": extra or {},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_checkpoint(path: str | Path, *,
                    schema: MetadataSchema | None = None,
                    ) -> tuple[DenoiserModel, NoiseSchedule, dict]:
    """Rebuild model and schedule; verify schema compatibility when given."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=True)

    if schema is not None:
        want = schema.fingerprint()
        have = payload["schema_fingerprint"]
        if want != have:
            raise CheckpointError(
                f"checkpoint {path} was trained against schema {have}, but the "
                f"provided schema fingerprints as {want}; refusing to sample "
                "with mismatched vocabularies"
            )

    spec = ConditioningSpec.from_dict(payload["conditioning"])
    hparams = dict(payload["hparams"])
    hparams["channel_mults"] = tuple(hparams["channel_mults"])
    model = DenoiserModel(spec, **hparams)
    model.load_state_dict(payload["state_dict"])
    model.eval()
    schedule = NoiseSchedule(betas=payload["betas"])
    return model, schedule, payload


__all__ = ["CheckpointError", "load_checkpoint", "save_checkpoint"]
