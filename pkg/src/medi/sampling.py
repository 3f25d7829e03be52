"""Sampling plans and their execution.

A plan is an explicit list of (class, metadata values, count) cells plus a
seed. Three constructors cover the built-in strategies:

* :func:`frequency_matched_plan` mirrors the empirical joint distribution
  of the training data (with no attributes, the class marginal).
* :func:`uniform_class_plan` spreads samples evenly over classes.
* :func:`cartesian_fill_plan` visits every class x metadata-value cell a
  fixed number of times, including cells the real data never populated.

Execution derives one seed per image by hashing the plan seed with the cell
values and image index, so any single image can be regenerated in isolation
and reruns are byte-identical regardless of batching.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import math
from dataclasses import dataclass
from pathlib import Path

import torch
from PIL import Image

from .diffusion.ddim import ddim_sample, to_uint8
from .diffusion.schedule import NoiseSchedule
from .diffusion.unet import DenoiserModel
from .registry import (
    DatasetManifest,
    MetadataSchema,
    PatchRecord,
    UNKNOWN,
    manifest_from_records,
    write_manifest,
)


class PlanError(ValueError):
    pass


@dataclass(frozen=True)
class PlanEntry:
    class_label: str
    values: tuple[str, ...]  # aligned with the plan's attributes
    count: int

    def __post_init__(self) -> None:
        # Zero is allowed so grid-shaped plans can keep empty cells explicit.
        if self.count < 0:
            raise PlanError(f"entry counts must not be negative, got {self.count}")


@dataclass(frozen=True)
class SamplingPlan:
    attributes: tuple[str, ...]
    entries: tuple[PlanEntry, ...]
    seed: int

    def __post_init__(self) -> None:
        for entry in self.entries:
            if len(entry.values) != len(self.attributes):
                raise PlanError(
                    f"entry {entry.class_label} carries {len(entry.values)} "
                    f"values for {len(self.attributes)} attributes"
                )
        cells = [(e.class_label, e.values) for e in self.entries]
        if len(set(cells)) != len(cells):
            raise PlanError("plan repeats a (class, values) cell")

    def total(self) -> int:
        return sum(e.count for e in self.entries)

    def to_dict(self) -> dict:
        return {
            "attributes": list(self.attributes),
            "seed": self.seed,
            "entries": [
                {"class": e.class_label, "values": list(e.values), "count": e.count}
                for e in self.entries
            ],
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "SamplingPlan":
        return cls(
            attributes=tuple(payload["attributes"]),
            entries=tuple(
                PlanEntry(e["class"], tuple(e["values"]), e["count"])
                for e in payload["entries"]
            ),
            seed=payload["seed"],
        )


def largest_remainder(keys: list, weights: list[float], total: int) -> list[int]:
    """Integer allocation proportional to weights, floor plus remainder.

    Remainders are granted by descending fractional part, ties broken by
    key order, so the allocation is deterministic.
    """
    weight_sum = float(sum(weights))
    if weight_sum <= 0:
        raise PlanError("allocation weights must sum to a positive value")
    exact = [total * w / weight_sum for w in weights]
    counts = [math.floor(e) for e in exact]
    remainder = total - sum(counts)
    order = sorted(range(len(keys)),
                   key=lambda i: (-(exact[i] - counts[i]), keys[i]))
    for i in order[:remainder]:
        counts[i] += 1
    return counts


def frequency_matched_plan(manifest: DatasetManifest, total: int,
                           attributes: tuple[str, ...], seed: int) -> SamplingPlan:
    """Allocate ``total`` samples matching the observed joint distribution."""
    if total < 1:
        raise PlanError(f"total must be positive, got {total}")
    if not len(manifest):
        raise PlanError("cannot match frequencies of an empty manifest")
    counts: dict[tuple, int] = {}
    for record in manifest.records:
        key = (record.class_label,
               tuple(record.attribute(a) for a in attributes))
        counts[key] = counts.get(key, 0) + 1
    keys = sorted(counts)
    allocation = largest_remainder(keys, [counts[k] for k in keys], total)
    entries = tuple(
        PlanEntry(class_label=key[0], values=key[1], count=n)
        for key, n in zip(keys, allocation) if n > 0
    )
    return SamplingPlan(attributes=tuple(attributes), entries=entries, seed=seed)


def uniform_class_plan(classes, total: int, seed: int) -> SamplingPlan:
    """Split ``total`` evenly over classes (remainder to the earliest)."""
    classes = sorted(set(classes))
    if not classes:
        raise PlanError("need at least one class")
    if total < 1:
        raise PlanError(f"total must be positive, got {total}")
    allocation = largest_remainder(classes, [1.0] * len(classes), total)
    entries = tuple(
        PlanEntry(class_label=cls, values=(), count=n)
        for cls, n in zip(classes, allocation) if n > 0
    )
    return SamplingPlan(attributes=(), entries=entries, seed=seed)


def cartesian_fill_plan(schema: MetadataSchema, total: int,
                        attributes: tuple[str, ...], seed: int, *,
                        classes: tuple[str, ...] | None = None,
                        value_subsets: dict[str, tuple[str, ...]] | None = None,
                        include_unknown: bool = False,
                        cap: int = 100_000) -> SamplingPlan:
    """Spread ``total`` samples evenly over every class x value combination.

    The grid spans the schema vocabularies, so cells never observed jointly
    in the real data are filled too; every cell appears in the plan even
    when its share rounds to zero. Unknown-valued cells are skipped unless
    requested, since they usually stand for missing metadata rather than a
    real subpopulation. ``classes`` and ``value_subsets`` shrink the grid
    to a subset of the vocabulary, e.g. to the values a generator was
    actually trained on.
    """
    if total < 1:
        raise PlanError(f"total must be positive, got {total}")
    if not attributes:
        raise PlanError("cartesian fill needs at least one attribute")
    axes = []
    for attr in attributes:
        values = [v for v in schema.vocab(attr).values
                  if include_unknown or v != UNKNOWN]
        if value_subsets is not None and attr in value_subsets:
            wanted = value_subsets[attr]
            stray = sorted(set(wanted) - set(values))
            if stray:
                raise PlanError(
                    f"values {stray} for {attr!r} are outside the vocabulary"
                )
            values = [v for v in values if v in set(wanted)]
        if not values:
            raise PlanError(f"attribute {attr!r} has no usable values")
        axes.append(values)
    if classes is None:
        class_list = list(schema.class_vocab.values)
    else:
        stray = sorted(set(classes) - set(schema.class_vocab.values))
        if stray:
            raise PlanError(f"classes {stray} are outside the vocabulary")
        class_list = [c for c in schema.class_vocab.values if c in set(classes)]
    classes = class_list
    cells = [(cls, combo) for cls in classes
             for combo in itertools.product(*axes)]
    if total > cap:
        raise PlanError(
            f"cartesian fill asked for {total} images, over the cap of {cap}; "
            "raise cap explicitly if this is intended"
        )
    allocation = largest_remainder(cells, [1.0] * len(cells), total)
    entries = tuple(
        PlanEntry(class_label=cls, values=combo, count=n)
        for (cls, combo), n in zip(cells, allocation)
    )
    return SamplingPlan(attributes=tuple(attributes), entries=entries, seed=seed)


def image_digest(plan_seed: int, class_label: str, values: tuple[str, ...],
                 index: int) -> str:
    """Stable 16-hex identity for one planned image.

    Generation is deterministic given this digest and a checkpoint, so it
    doubles as a content address: it names the file on disk and seeds the
    initial noise.
    """
    key = "|".join([str(plan_seed), class_label, *values, str(index)])
    return hashlib.sha256(key.encode()).hexdigest()[:16]


def image_seed(plan_seed: int, class_label: str, values: tuple[str, ...],
               index: int) -> int:
    """Per-image noise seed derived from :func:`image_digest`."""
    return int(image_digest(plan_seed, class_label, values, index), 16) % (2**63)


def _synthetic_record(schema: MetadataSchema, plan: SamplingPlan,
                      entry: PlanEntry, index: int, image_ref: str) -> PatchRecord:
    fields = dict(zip(plan.attributes, entry.values))
    return PatchRecord(
        patch_id=image_ref.removesuffix(".png"),
        image_ref=image_ref,
        patient_id="synthetic",
        class_label=entry.class_label,
        site=fields.get("site", UNKNOWN),
        race=fields.get("race", UNKNOWN),
        gender=fields.get("gender", UNKNOWN),
        age=None,
        synthetic=True,
    )


def sample_plan(model: DenoiserModel, schedule: NoiseSchedule,
                plan: SamplingPlan, schema: MetadataSchema, *,
                num_sample_steps: int = 100, batch_size: int = 64,
                ) -> tuple[torch.Tensor, list[str], list[tuple[str, ...]]]:
    """Generate every planned image in memory.

    Returns the image tensor in [-1, 1] plus aligned class labels and
    attribute-value tuples. Pixels match :func:`execute_plan` for the same
    plan, since both derive the initial noise from :func:`image_seed`.
    """
    for attr in plan.attributes:
        schema.vocab(attr)
    images, labels, values = [], [], []
    for entry in plan.entries:
        if entry.count == 0:
            continue
        class_id = schema.class_vocab.id_of(entry.class_label)
        attr_ids = [schema.vocab(a).id_of(v)
                    for a, v in zip(plan.attributes, entry.values)]
        for start in range(0, entry.count, batch_size):
            indices = range(start, min(start + batch_size, entry.count))
            noise = torch.stack([
                torch.randn(
                    (model.in_channels, model.image_size, model.image_size),
                    generator=torch.Generator().manual_seed(
                        image_seed(plan.seed, entry.class_label, entry.values, i)
                    ),
                )
                for i in indices
            ])
            n = len(noise)
            images.append(ddim_sample(
                model, schedule,
                class_ids=torch.full((n,), class_id, dtype=torch.long),
                attribute_ids=(
                    torch.tensor(attr_ids, dtype=torch.long).repeat(n, 1)
                    if attr_ids else None
                ),
                num_sample_steps=num_sample_steps,
                initial_noise=noise,
            ))
            labels.extend([entry.class_label] * n)
            values.extend([entry.values] * n)
    if not images:
        raise PlanError("plan contains no images to draw")
    return torch.cat(images), labels, values


def execute_plan(model: DenoiserModel, schedule: NoiseSchedule,
                 plan: SamplingPlan, schema: MetadataSchema,
                 out_dir: str | Path, *, num_sample_steps: int = 100,
                 batch_size: int = 64, resume: bool = False,
                 ) -> DatasetManifest:
    """Generate every planned image and write PNGs plus a manifest.

    With ``resume`` set, images whose files already exist are not
    regenerated; the manifest always covers the full plan.
    """
    out_dir = Path(out_dir)
    images_dir = out_dir / "images"
    images_dir.mkdir(parents=True, exist_ok=True)

    for attr in plan.attributes:
        schema.vocab(attr)  # raises early on unknown attributes

    records = []
    for entry in plan.entries:
        class_id = schema.class_vocab.id_of(entry.class_label)
        attr_ids = [schema.vocab(a).id_of(v)
                    for a, v in zip(plan.attributes, entry.values)]

        pending: list[tuple[int, Path]] = []
        for i in range(entry.count):
            digest = image_digest(plan.seed, entry.class_label, entry.values, i)
            name = f"syn_{digest}.png"
            path = images_dir / name
            records.append(_synthetic_record(schema, plan, entry, i, name))
            if resume and path.exists():
                continue
            pending.append((i, path))

        for start in range(0, len(pending), batch_size):
            chunk = pending[start:start + batch_size]
            noise = torch.stack([
                torch.randn(
                    (model.in_channels, model.image_size, model.image_size),
                    generator=torch.Generator().manual_seed(
                        image_seed(plan.seed, entry.class_label, entry.values, i)
                    ),
                )
                for i, _ in chunk
            ])
            n = len(chunk)
            images = ddim_sample(
                model, schedule,
                class_ids=torch.full((n,), class_id, dtype=torch.long),
                attribute_ids=(
                    torch.tensor(attr_ids, dtype=torch.long).repeat(n, 1)
                    if attr_ids else None
                ),
                num_sample_steps=num_sample_steps,
                initial_noise=noise,
            )
            for (_, path), img in zip(chunk, to_uint8(images)):
                Image.fromarray(img.numpy()).save(path)

    manifest = manifest_from_records(records, source=str(out_dir / "manifest.csv"))
    write_manifest(manifest, out_dir / "manifest.csv")
    (out_dir / "plan.json").write_text(json.dumps(plan.to_dict(), indent=2,
                                                  sort_keys=True) + "\n")
    return manifest


__all__ = [
    "PlanEntry",
    "image_digest",
    "largest_remainder",
    "PlanError",
    "SamplingPlan",
    "cartesian_fill_plan",
    "execute_plan",
    "frequency_matched_plan",
    "image_seed",
    "sample_plan",
    "uniform_class_plan",
]
