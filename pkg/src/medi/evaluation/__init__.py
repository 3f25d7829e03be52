"""Evaluation stack: frozen feature extraction, distribution distance, and
few-shot linear probing with site-averaged accuracy."""

from .features import ConvFeatureExtractor, FeatureExtractor
from .fid import (
    COVARIANCE_EPS,
    FIDError,
    FIDReport,
    FIDResult,
    fid,
    fid_from_features,
    frechet_distance,
    gaussian_stats,
    per_class_fid,
)
from .probe import (
    LinearProbe,
    ProbeError,
    ProbeResult,
    RunAggregate,
    aggregate_probe_results,
    aggregate_runs,
    balanced_accuracy,
    evaluate_probe,
    per_site_accuracies,
    select_support,
    single_class_sites,
    train_linear_probe,
    tss_averaged_accuracy,
)

__all__ = [
    "COVARIANCE_EPS",
    "ConvFeatureExtractor",
    "FeatureExtractor",
    "FIDError",
    "FIDReport",
    "FIDResult",
    "fid",
    "fid_from_features",
    "frechet_distance",
    "gaussian_stats",
    "per_class_fid",
    "LinearProbe",
    "ProbeError",
    "ProbeResult",
    "RunAggregate",
    "aggregate_probe_results",
    "aggregate_runs",
    "balanced_accuracy",
    "evaluate_probe",
    "per_site_accuracies",
    "select_support",
    "single_class_sites",
    "train_linear_probe",
    "tss_averaged_accuracy",
]
