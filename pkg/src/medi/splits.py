"""Split regimes for diffusion training and downstream evaluation.

Two regimes live here:

* :func:`holdout_split` removes, for each class, a random fraction of its
  observed metadata combinations (e.g. site x race) so those subpopulations
  stay completely unseen during diffusion training.
* :func:`correlated_task_split` builds a downstream training set in which each
  class is sourced from a single site, together with a test set drawn only
  from sites the diffusion model never saw. :func:`enumerate_runs` emits one
  such split per injective class-to-site assignment.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .registry import DatasetManifest, ManifestError, PatchRecord


class SplitError(ValueError):
    """Raised when a split request is invalid or infeasible."""


Combination = tuple[str, ...]


@dataclass
class HoldoutSplit:
    """Per-class partition of metadata combinations into train and holdout."""

    train: DatasetManifest
    holdout: DatasetManifest
    excluded: dict[str, tuple[Combination, ...]]
    axes: tuple[str, ...]
    fraction: float
    seed: int

    def excluded_sidecar(self) -> dict:
        """JSON-ready record of what was excluded and under which knobs."""
        return {
            "axes": list(self.axes),
            "fraction": self.fraction,
            "seed": self.seed,
            "excluded": {
                cls: [list(combo) for combo in combos]
                for cls, combos in sorted(self.excluded.items())
            },
        }


def _record_combination(record: PatchRecord, axes: Sequence[str]) -> Combination:
    return tuple(record.attribute(axis) for axis in axes)


def holdout_split(manifest: DatasetManifest, fraction: float,
                  axes: Sequence[str], seed: int) -> HoldoutSplit:
    """Hold out a per-class fraction of observed metadata combinations.

    For each class, floor(fraction * n_combinations) combinations are chosen
    uniformly at random (at least one when the class has two or more), and
    every patch matching a chosen combination moves to the holdout partition.
    The selection is reproducible from the seed alone.
    """
    if not 0.0 < fraction < 1.0:
        raise SplitError(f"fraction must be in (0, 1), got {fraction}")
    axes = tuple(axes)
    if not axes:
        raise SplitError("at least one holdout axis is required")
    for axis in axes:
        if axis not in manifest.schema.attribute_names:
            raise SplitError(
                f"unknown holdout axis {axis!r}; known: "
                + ", ".join(manifest.schema.attribute_names)
            )

    by_class: dict[str, list[PatchRecord]] = {}
    for record in manifest.records:
        by_class.setdefault(record.class_label, []).append(record)

    rng = np.random.default_rng(seed)
    excluded: dict[str, tuple[Combination, ...]] = {}
    # Iterate classes in vocabulary order so the rng consumption is stable.
    for cls in manifest.schema.class_vocab.values:
        records = by_class.get(cls, [])
        if not records:
            continue
        combos = sorted({_record_combination(r, axes) for r in records})
        n = len(combos)
        n_excluded = math.floor(fraction * n)
        if n >= 2:
            n_excluded = max(1, n_excluded)
        if n_excluded == 0:
            excluded[cls] = ()
            continue
        chosen = rng.choice(n, size=n_excluded, replace=False)
        excluded[cls] = tuple(sorted(combos[i] for i in chosen))

    excluded_sets = {cls: set(combos) for cls, combos in excluded.items()}

    def in_holdout(record: PatchRecord) -> bool:
        return _record_combination(record, axes) in excluded_sets.get(record.class_label, ())

    train = manifest.restrict(lambda r: not in_holdout(r))
    holdout = manifest.restrict(in_holdout)
    return HoldoutSplit(
        train=train,
        holdout=holdout,
        excluded=excluded,
        axes=axes,
        fraction=fraction,
        seed=seed,
    )


@dataclass(frozen=True)
class TaskSpec:
    """A downstream classification task over a subset of classes.

    ``assignment`` optionally pins each class to a site; when omitted, sites
    are drawn at random without replacement across classes. ``min_patches``
    is the smallest per-(class, site) pool considered assignable.
    """

    name: str
    classes: tuple[str, ...]
    assignment: tuple[tuple[str, str], ...] | None = None
    min_patches: int = 1

    def __post_init__(self) -> None:
        if not self.classes:
            raise SplitError("task must name at least one class")
        if len(set(self.classes)) != len(self.classes):
            raise SplitError("task classes must be unique")

    def assignment_map(self) -> dict[str, str] | None:
        if self.assignment is None:
            return None
        return dict(self.assignment)


@dataclass
class CorrelatedTaskSplit:
    """One-site-per-class training split plus an unseen-site test split."""

    task: str
    classes: tuple[str, ...]
    assignment: dict[str, str]
    train: DatasetManifest
    test: DatasetManifest
    run_id: str
    seed: int


def _candidate_sites(manifest: DatasetManifest, spec: TaskSpec,
                     site_pool: set[str]) -> dict[str, list[str]]:
    """Sites per class, in site-vocabulary order, with enough patches."""
    counts: dict[tuple[str, str], int] = {}
    for record in manifest.records:
        if record.class_label in spec.classes and record.site in site_pool:
            key = (record.class_label, record.site)
            counts[key] = counts.get(key, 0) + 1
    site_order = {s: i for i, s in enumerate(manifest.schema.vocab("site").values)}
    out: dict[str, list[str]] = {}
    for cls in spec.classes:
        sites = [s for s in site_pool if counts.get((cls, s), 0) >= spec.min_patches]
        sites.sort(key=lambda s: site_order.get(s, len(site_order)))
        if not sites:
            raise SplitError(
                f"class {cls!r} has no site with >= {spec.min_patches} patches"
            )
        out[cls] = sites
    return out


def _build_split(manifest: DatasetManifest, spec: TaskSpec,
                 assignment: dict[str, str], seed: int,
                 test_manifest: DatasetManifest | None,
                 test_sites: set[str] | None,
                 run_id: str) -> CorrelatedTaskSplit:
    assigned_sites = set(assignment.values())
    if len(assigned_sites) != len(assignment):
        raise SplitError(f"assignment is not injective: {assignment}")

    train = manifest.restrict(
        lambda r: r.class_label in assignment and r.site == assignment[r.class_label]
    )

    if test_manifest is None:
        test_manifest = manifest
    if test_sites is None:
        # Default to sites the training pool has never seen in any class.
        test_sites = test_manifest.sites() - manifest.sites()
    test = test_manifest.restrict(
        lambda r: r.class_label in spec.classes and r.site in test_sites
    )
    return CorrelatedTaskSplit(
        task=spec.name,
        classes=spec.classes,
        assignment=dict(assignment),
        train=train,
        test=test,
        run_id=run_id,
        seed=seed,
    )


def _format_run_id(spec: TaskSpec, assignment: Mapping[str, str]) -> str:
    pairs = ",".join(f"{cls}={assignment[cls]}" for cls in spec.classes)
    return f"{spec.name}[{pairs}]"


def correlated_task_split(manifest: DatasetManifest, task_spec: TaskSpec, seed: int,
                          *, site_pool: Iterable[str] | None = None,
                          test_manifest: DatasetManifest | None = None,
                          test_sites: Iterable[str] | None = None,
                          ) -> CorrelatedTaskSplit:
    """Build one correlated split, drawing the assignment at random if unset.

    ``manifest`` is the pool the correlated training data is cut from (after
    any diffusion-training holdout). ``site_pool`` limits which sites may be
    assigned; ``test_manifest``/``test_sites`` control where test records come
    from, defaulting to sites absent from the training pool.
    """
    pool = set(site_pool) if site_pool is not None else manifest.sites()
    candidates = _candidate_sites(manifest, task_spec, pool)

    assignment = task_spec.assignment_map()
    if assignment is None:
        if len(pool) < len(task_spec.classes):
            raise SplitError(
                f"{len(task_spec.classes)} classes need at least as many distinct "
                f"sites, found {len(pool)}"
            )
        rng = np.random.default_rng(seed)
        assignment = {}
        taken: set[str] = set()
        for cls in task_spec.classes:
            available = [s for s in candidates[cls] if s not in taken]
            if not available:
                raise SplitError(f"no unassigned site left for class {cls!r}")
            site = available[int(rng.integers(len(available)))]
            assignment[cls] = site
            taken.add(site)
    else:
        for cls in task_spec.classes:
            if cls not in assignment:
                raise SplitError(f"assignment missing class {cls!r}")
            if assignment[cls] not in candidates[cls]:
                raise SplitError(
                    f"class {cls!r} cannot be assigned site {assignment[cls]!r}: "
                    f"not available with >= {task_spec.min_patches} patches"
                )

    return _build_split(
        manifest, task_spec, assignment, seed,
        test_manifest,
        set(test_sites) if test_sites is not None else None,
        run_id=_format_run_id(task_spec, assignment),
    )


def enumerate_runs(manifest: DatasetManifest, task_spec: TaskSpec,
                   *, seed: int = 0,
                   site_pool: Iterable[str] | None = None,
                   test_manifest: DatasetManifest | None = None,
                   test_sites: Iterable[str] | None = None,
                   max_runs: int = 1000) -> list[CorrelatedTaskSplit]:
    """One split per injective class-to-site assignment, in deterministic order.

    Assignments are enumerated lexicographically by (class order, site
    vocabulary order). Raises when the count would exceed ``max_runs``.
    """
    if task_spec.assignment is not None:
        raise SplitError("enumerate_runs expects a task spec without a fixed assignment")
    pool = set(site_pool) if site_pool is not None else manifest.sites()
    candidates = _candidate_sites(manifest, task_spec, pool)
    if len(pool) < len(task_spec.classes):
        raise SplitError(
            f"{len(task_spec.classes)} classes need at least as many distinct "
            f"sites, found {len(pool)}"
        )

    assignments: list[dict[str, str]] = []

    def extend(idx: int, current: dict[str, str], taken: set[str]) -> None:
        if idx == len(task_spec.classes):
            assignments.append(dict(current))
            if len(assignments) > max_runs:
                raise SplitError(
                    f"enumeration of task {task_spec.name!r} exceeds max_runs="
                    f"{max_runs}; raise the cap explicitly to proceed"
                )
            return
        cls = task_spec.classes[idx]
        for site in candidates[cls]:
            if site in taken:
                continue
            current[cls] = site
            taken.add(site)
            extend(idx + 1, current, taken)
            taken.discard(site)
            del current[cls]

    extend(0, {}, set())
    if not assignments:
        raise SplitError(f"task {task_spec.name!r} admits no injective site assignment")

    resolved_test_sites = set(test_sites) if test_sites is not None else None
    return [
        _build_split(
            manifest, task_spec, assignment, seed,
            test_manifest, resolved_test_sites,
            run_id=f"run{i:03d}:" + _format_run_id(task_spec, assignment),
        )
        for i, assignment in enumerate(assignments)
    ]


def leakage(split: CorrelatedTaskSplit, diffusion_train_sites: Iterable[str]) -> set[str]:
    """Sites appearing both in the test split and in diffusion training."""
    return {r.site for r in split.test.records} & set(diffusion_train_sites)


__all__ = [
    "SplitError",
    "HoldoutSplit",
    "TaskSpec",
    "CorrelatedTaskSplit",
    "holdout_split",
    "correlated_task_split",
    "enumerate_runs",
    "leakage",
]
