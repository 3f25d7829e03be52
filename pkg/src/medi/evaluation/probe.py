"""Few-shot linear probes and the accuracy metrics reported for them.

The probe is a plain multinomial logistic regression fit on a small,
seeded support set (a fixed number of examples per class). Reported
metrics are balanced accuracy (mean per-class recall, in percent) and
its site-averaged variant: balanced accuracy within each site, then an
unweighted mean over sites, so small sites count as much as large ones.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from sklearn.linear_model import LogisticRegression


class ProbeError(ValueError):
    pass


def select_support(labels: Sequence[str], n_per_class: int,
                   seed: int) -> np.ndarray:
    """Indices of a support set with exactly n_per_class examples per class.

    Classes are visited in sorted order and draws come from a single
    default_rng(seed) stream, so the selection depends only on the label
    sequence and the seed. A class with fewer than n_per_class examples
    is an error; silently training on less would skew comparisons.
    """
    if n_per_class < 1:
        raise ProbeError(f"n_per_class must be >= 1, got {n_per_class}")
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    picked: list[np.ndarray] = []
    for cls in sorted(set(labels.tolist())):
        idx = np.flatnonzero(labels == cls)
        if idx.shape[0] < n_per_class:
            raise ProbeError(
                f"class {cls!r} has {idx.shape[0]} examples, "
                f"need {n_per_class} for the support set"
            )
        picked.append(rng.choice(idx, size=n_per_class, replace=False))
    return np.sort(np.concatenate(picked))


@dataclass(frozen=True)
class LinearProbe:
    model: LogisticRegression
    classes: tuple[str, ...]
    n_train: int

    def predict(self, features: np.ndarray) -> np.ndarray:
        return self.model.predict(np.asarray(features, dtype=np.float64))


def train_linear_probe(features: np.ndarray, labels: Sequence[str], *,
                       n_per_class: int | None = None, seed: int = 0,
                       C: float = 1.0, tol: float = 1e-6,
                       max_iter: int = 2000) -> LinearProbe:
    """Fit the probe, optionally on a seeded n_per_class-shot support set.

    With n_per_class=None the full label set is used.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    if features.ndim != 2:
        raise ProbeError(f"features must be 2-d, got shape {features.shape}")
    if features.shape[0] != labels.shape[0]:
        raise ProbeError(
            f"{features.shape[0]} feature rows vs {labels.shape[0]} labels"
        )
    if len(set(labels.tolist())) < 2:
        raise ProbeError("need at least two classes to fit a probe")

    if n_per_class is not None:
        support = select_support(labels, n_per_class, seed)
        features = features[support]
        labels = labels[support]

    model = LogisticRegression(
        C=C, tol=tol, max_iter=max_iter, solver="lbfgs",
    )
    model.fit(features, labels)
    return LinearProbe(
        model=model,
        classes=tuple(str(c) for c in model.classes_),
        n_train=int(features.shape[0]),
    )


def balanced_accuracy(y_true: Sequence[str], y_pred: Sequence[str], *,
                      classes: Sequence[str] | None = None) -> float:
    """Mean per-class recall, in percent.

    When `classes` is given, members absent from y_true are excluded from
    the mean with a warning instead of silently dragging it to zero.
    """
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    if y_true.shape != y_pred.shape:
        raise ProbeError(
            f"shape mismatch: {y_true.shape} truth vs {y_pred.shape} predictions"
        )
    if y_true.shape[0] == 0:
        raise ProbeError("cannot score an empty label set")

    present = sorted(set(y_true.tolist()))
    if classes is not None:
        missing = sorted(set(classes) - set(present))
        if missing:
            warnings.warn(
                f"classes with zero test instances excluded from "
                f"balanced accuracy: {missing}",
                stacklevel=2,
            )
    recalls = []
    for cls in present:
        mask = y_true == cls
        recalls.append(float(np.mean(y_pred[mask] == cls)))
    return 100.0 * float(np.mean(recalls))


def per_site_accuracies(y_true: Sequence[str], y_pred: Sequence[str],
                        sites: Sequence[str]) -> dict[str, float]:
    """Balanced accuracy computed within each site."""
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    sites = np.asarray(sites)
    if not (y_true.shape == y_pred.shape == sites.shape):
        raise ProbeError(
            f"aligned arrays required, got {y_true.shape}, "
            f"{y_pred.shape}, {sites.shape}"
        )
    out: dict[str, float] = {}
    for site in sorted(set(sites.tolist())):
        mask = sites == site
        out[site] = balanced_accuracy(y_true[mask], y_pred[mask])
    return out


def single_class_sites(y_true: Sequence[str],
                       sites: Sequence[str]) -> tuple[str, ...]:
    """Sites whose test instances all share one class.

    For such a site the per-site score degenerates to recall on that one
    class; callers flag these so readers do not over-trust the number.
    """
    y_true = np.asarray(y_true)
    sites = np.asarray(sites)
    flagged = []
    for site in sorted(set(sites.tolist())):
        if len(set(y_true[sites == site].tolist())) == 1:
            flagged.append(site)
    return tuple(flagged)


def tss_averaged_accuracy(y_true: Sequence[str], y_pred: Sequence[str],
                          sites: Sequence[str]) -> float:
    """Unweighted mean of per-site balanced accuracies."""
    per_site = per_site_accuracies(y_true, y_pred, sites)
    if not per_site:
        raise ProbeError("no sites to average over")
    return float(np.mean(list(per_site.values())))


@dataclass(frozen=True)
class ProbeResult:
    run_id: str
    overall: float
    tss_avg: float | None
    per_site: tuple[tuple[str, float], ...]
    single_class_sites: tuple[str, ...]
    n_train: int
    n_test: int

    def to_dict(self) -> dict:
        return {
            "run_id": self.run_id,
            "overall": self.overall,
            "tss_avg": self.tss_avg,
            "per_site": {k: v for k, v in self.per_site},
            "single_class_sites": list(self.single_class_sites),
            "n_train": self.n_train,
            "n_test": self.n_test,
        }


def evaluate_probe(probe: LinearProbe, features: np.ndarray,
                   labels: Sequence[str],
                   sites: Sequence[str] | None = None,
                   run_id: str = "") -> ProbeResult:
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    if features.shape[0] != labels.shape[0]:
        raise ProbeError(
            f"{features.shape[0]} feature rows vs {labels.shape[0]} labels"
        )
    preds = probe.predict(features)
    overall = balanced_accuracy(labels, preds, classes=probe.classes)
    tss_avg = None
    per_site: tuple[tuple[str, float], ...] = ()
    flagged: tuple[str, ...] = ()
    if sites is not None:
        site_accs = per_site_accuracies(labels, preds, sites)
        per_site = tuple(sorted(site_accs.items()))
        tss_avg = float(np.mean(list(site_accs.values())))
        flagged = single_class_sites(labels, sites)
    return ProbeResult(
        run_id=run_id,
        overall=overall,
        tss_avg=tss_avg,
        per_site=per_site,
        single_class_sites=flagged,
        n_train=probe.n_train,
        n_test=int(labels.shape[0]),
    )


@dataclass(frozen=True)
class RunAggregate:
    mean: float
    se: float | None
    n_runs: int

    def format(self) -> str:
        if self.se is None:
            return f"{self.mean:.2f}"
        return f"{self.mean:.2f} ± {self.se:.2f}"


def aggregate_runs(values: Sequence[float]) -> RunAggregate:
    """Mean and standard error over repeated runs.

    The error is the population standard deviation over runs divided by
    sqrt(n); a single run has no spread to report and gets se=None.
    """
    values = [float(v) for v in values]
    if not values:
        raise ProbeError("no run values to aggregate")
    mean = float(np.mean(values))
    if len(values) == 1:
        return RunAggregate(mean=mean, se=None, n_runs=1)
    se = float(np.std(values) / np.sqrt(len(values)))
    return RunAggregate(mean=mean, se=se, n_runs=len(values))


def aggregate_probe_results(
    results: Sequence[ProbeResult],
) -> Mapping[str, RunAggregate]:
    """Aggregate overall and site-averaged accuracy over repeated runs."""
    if not results:
        raise ProbeError("no probe results to aggregate")
    out = {"overall": aggregate_runs([r.overall for r in results])}
    if all(r.tss_avg is not None for r in results):
        out["tss_avg"] = aggregate_runs([r.tss_avg for r in results])
    return out


__all__ = [
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
