import pytest

from medi.config import (
    ExperimentConfig,
    ModelConfig,
    ProbeConfig,
    ScheduleConfig,
)
from medi.diffusion.training import TrainingConfig
from medi.toydata import ToyDatasetSpec, generate_toy_dataset


@pytest.fixture(scope="session")
def micro_toy(tmp_path_factory):
    """A small 2-class x 3-site toy dataset shared across test modules."""
    root = tmp_path_factory.mktemp("micro_toy")
    spec = ToyDatasetSpec(
        n_classes=2, n_sites=3, per_class=36, image_size=16,
        correlation=0.0, tint_delta=0.5, seed=0,
    )
    manifest = generate_toy_dataset(spec, root)
    return manifest, root / "images"


@pytest.fixture(scope="session")
def micro_config():
    """Budgets tuned for speed, not quality: studies finish in seconds."""
    return ExperimentConfig(
        model=ModelConfig(image_size=16, base_channels=8, channel_mults=(1, 2),
                          d_t=32, d_class=16, d_e=16, norm_groups=4),
        schedule=ScheduleConfig(steps=200, sample_steps=8),
        training=TrainingConfig(steps=30, batch_size=16, lr=2e-3, log_every=10),
        probe=ProbeConfig(shots=8, feature_widths=(8, 16)),
        synth_total=20,
        study_seeds=(0,),
    )
