"""Fréchet distance between Gaussian fits of feature sets.

The distance between N(mu1, S1) and N(mu2, S2) is

    ||mu1 - mu2||^2 + tr(S1 + S2 - 2 (S1 S2)^(1/2))

Both covariances are regularized with 1e-6 on the diagonal before the
matrix square root, and the sqrtm output is symmetrized, which keeps the
computation stable for near-singular fits without changing well-conditioned
results beyond float noise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg


class FIDError(ValueError):
    pass


COVARIANCE_EPS = 1e-6


def gaussian_stats(features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mean and covariance of a (N, D) feature matrix, N >= 2."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2:
        raise FIDError(f"features must be 2-d, got shape {features.shape}")
    if features.shape[0] < 2:
        raise FIDError(
            f"need at least 2 samples for a covariance, got {features.shape[0]}"
        )
    if not np.all(np.isfinite(features)):
        raise FIDError("features contain non-finite values")
    mu = features.mean(axis=0)
    sigma = np.cov(features, rowvar=False)
    sigma = np.atleast_2d(sigma)
    return mu, sigma


def frechet_distance(mu1: np.ndarray, sigma1: np.ndarray,
                     mu2: np.ndarray, sigma2: np.ndarray,
                     eps: float = COVARIANCE_EPS) -> float:
    mu1 = np.asarray(mu1, dtype=np.float64)
    mu2 = np.asarray(mu2, dtype=np.float64)
    if mu1.shape != mu2.shape:
        raise FIDError(f"mean shapes differ: {mu1.shape} vs {mu2.shape}")
    d = mu1.shape[0]
    sigma1 = np.asarray(sigma1, dtype=np.float64) + eps * np.eye(d)
    sigma2 = np.asarray(sigma2, dtype=np.float64) + eps * np.eye(d)

    covmean = scipy.linalg.sqrtm(sigma1 @ sigma2)
    if np.iscomplexobj(covmean):
        covmean = covmean.real
    covmean = (covmean + covmean.T) / 2.0

    diff = mu1 - mu2
    value = float(
        diff @ diff + np.trace(sigma1) + np.trace(sigma2) - 2.0 * np.trace(covmean)
    )
    if not np.isfinite(value):
        raise FIDError("distance came out non-finite; check the feature sets")
    # Exact-match inputs can land a hair below zero in float arithmetic.
    return max(value, 0.0)


@dataclass(frozen=True)
class FIDResult:
    value: float
    n_real: int
    n_synth: int

    def to_dict(self) -> dict:
        return {"fid": self.value, "n_real": self.n_real, "n_synth": self.n_synth}


def fid_from_features(real: np.ndarray, synth: np.ndarray) -> FIDResult:
    mu_r, sigma_r = gaussian_stats(real)
    mu_s, sigma_s = gaussian_stats(synth)
    return FIDResult(
        value=frechet_distance(mu_r, sigma_r, mu_s, sigma_s),
        n_real=int(np.asarray(real).shape[0]),
        n_synth=int(np.asarray(synth).shape[0]),
    )


def fid(real: np.ndarray, synth: np.ndarray) -> float:
    return fid_from_features(real, synth).value


@dataclass(frozen=True)
class FIDReport:
    """Overall plus classwise distances between a real and a synthetic set."""

    overall: float
    per_class: tuple[tuple[str, float], ...]
    skipped: tuple[str, ...]
    n_real: int
    n_synth: int

    def as_dict(self) -> dict[str, float]:
        return dict(self.per_class)

    @property
    def macro_average(self) -> float:
        if not self.per_class:
            raise FIDError("no class had enough samples on both sides")
        return float(np.mean([v for _, v in self.per_class]))

    def to_dict(self) -> dict:
        return {
            "overall": self.overall,
            "per_class": {k: v for k, v in self.per_class},
            "macro_average": self.macro_average,
            "skipped": list(self.skipped),
            "n_real": self.n_real,
            "n_synth": self.n_synth,
        }


def per_class_fid(real_features: np.ndarray, real_labels,
                  synth_features: np.ndarray, synth_labels,
                  *, min_count: int = 2) -> FIDReport:
    """Overall and classwise distances.

    Classes too thin on either side are listed as skipped rather than
    silently dropped; the macro average covers the scored classes only.
    """
    real_labels = np.asarray(real_labels)
    synth_labels = np.asarray(synth_labels)
    real_features = np.asarray(real_features, dtype=np.float64)
    synth_features = np.asarray(synth_features, dtype=np.float64)
    if real_features.shape[0] != real_labels.shape[0]:
        raise FIDError("real labels must align with real features")
    if synth_features.shape[0] != synth_labels.shape[0]:
        raise FIDError("synthetic labels must align with synthetic features")

    classes = sorted(set(real_labels.tolist()) | set(synth_labels.tolist()))
    scored: list[tuple[str, float]] = []
    skipped: list[str] = []
    for cls in classes:
        r = real_features[real_labels == cls]
        s = synth_features[synth_labels == cls]
        if r.shape[0] < min_count or s.shape[0] < min_count:
            skipped.append(cls)
            continue
        scored.append((cls, fid(r, s)))
    return FIDReport(
        overall=fid(real_features, synth_features),
        per_class=tuple(scored),
        skipped=tuple(skipped),
        n_real=real_features.shape[0],
        n_synth=synth_features.shape[0],
    )


__all__ = [
    "COVARIANCE_EPS",
    "FIDError",
    "FIDReport",
    "FIDResult",
    "fid",
    "fid_from_features",
    "frechet_distance",
    "gaussian_stats",
    "per_class_fid",
]
