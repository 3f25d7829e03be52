"""Experiment configuration: defaults, YAML loading, strict key checking.

Every knob a run needs lives in one frozen dataclass tree so a checkpoint
or report can carry the exact configuration it was produced under. YAML
files override defaults selectively; unknown keys are rejected rather than
silently ignored.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .diffusion.training import TrainingConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 32
    in_channels: int = 3
    base_channels: int = 32
    channel_mults: tuple[int, ...] = (1, 2)
    blocks_per_level: int = 1
    norm_groups: int = 8
    d_t: int = 128
    d_class: int = 64
    d_e: int = 64
    attributes: tuple[str, ...] = ("site",)

    def class_only(self) -> "ModelConfig":
        """Same backbone, conditioning on the class alone."""
        return dataclasses.replace(self, attributes=(), d_class=self.d_t, d_e=0)


@dataclass(frozen=True)
class ScheduleConfig:
    steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    sample_steps: int = 100


@dataclass(frozen=True)
class ProbeConfig:
    shots: int = 20
    C: float = 1.0
    tol: float = 1e-6
    max_iter: int = 2000
    feature_seed: int = 0
    feature_widths: tuple[int, ...] = (16, 32, 64)


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    training: TrainingConfig = field(
        default_factory=lambda: TrainingConfig(steps=5000, batch_size=32,
                                               lr=2e-3, seed=0, log_every=500)
    )
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    holdout_fraction: float = 0.5
    holdout_axes: tuple[str, ...] = ("site",)
    holdout_seed: int = 0
    synth_total: int = 256
    study_seeds: tuple[int, ...] = (0, 1, 2)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_SECTIONS = {
    "model": ModelConfig,
    "schedule": ScheduleConfig,
    "training": TrainingConfig,
    "probe": ProbeConfig,
}


def _coerce(cls, payload: dict, context: str):
    if not isinstance(payload, dict):
        raise ConfigError(f"{context} must be a mapping, got {type(payload).__name__}")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(payload) - set(known)
    if unknown:
        raise ConfigError(
            f"unknown {context} keys: {', '.join(sorted(unknown))}; "
            f"known: {', '.join(sorted(known))}"
        )
    kwargs = {}
    for key, value in payload.items():
        if isinstance(value, list):
            value = tuple(value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"bad {context} config: {exc}") from exc


def config_from_dict(payload: dict) -> ExperimentConfig:
    if not isinstance(payload, dict):
        raise ConfigError("configuration root must be a mapping")
    top_known = {f.name for f in dataclasses.fields(ExperimentConfig)}
    unknown = set(payload) - top_known
    if unknown:
        raise ConfigError(
            f"unknown config keys: {', '.join(sorted(unknown))}; "
            f"known: {', '.join(sorted(top_known))}"
        )
    kwargs = {}
    for key, value in payload.items():
        if key in _SECTIONS:
            kwargs[key] = _coerce(_SECTIONS[key], value, key)
        elif isinstance(value, list):
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = value
    return ExperimentConfig(**kwargs)


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    payload = yaml.safe_load(path.read_text())
    if payload is None:
        payload = {}
    return config_from_dict(payload)


__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "ModelConfig",
    "ProbeConfig",
    "ScheduleConfig",
    "config_from_dict",
    "load_config",
]
