"""Metadata-guided conditional diffusion for tissue-style image data.

The package trains diffusion models conditioned jointly on class labels
and metadata attributes (acquisition site and similar), draws targeted
synthetic samples to fill class x metadata gaps, and measures what that
buys: generative fidelity per class, and classifier robustness when test
data comes from sites the training side never saw.
"""

__version__ = "0.1.0"

from .config import ExperimentConfig, load_config
from .registry import DatasetManifest, MetadataSchema, PatchRecord, load_manifest
from .splits import TaskSpec, correlated_task_split, enumerate_runs, holdout_split
from .studies import run_fid_study, run_shift_study

__all__ = [
    "DatasetManifest",
    "ExperimentConfig",
    "MetadataSchema",
    "PatchRecord",
    "TaskSpec",
    "__version__",
    "correlated_task_split",
    "enumerate_runs",
    "holdout_split",
    "load_config",
    "load_manifest",
    "run_fid_study",
    "run_shift_study",
]
