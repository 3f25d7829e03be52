"""Synthetic image corpus with controllable class/site confounding.

Each class draws a distinct geometric figure; each site applies a distinct
multiplicative color tint. The two factors are independent mechanisms, so a
classifier that keys on color instead of shape is measurably fooled when
the class/site pairing shifts between training and test data. The
``correlation`` knob sets how strongly each class concentrates on its
preferred site; per-cell counts are realized deterministically so a given
spec always produces the same manifest layout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .registry import DatasetManifest, PatchRecord, manifest_from_records, write_manifest
from .sampling import largest_remainder

MAX_CLASSES = 8


class ToyDataError(ValueError):
    pass


@dataclass(frozen=True)
class ToyDatasetSpec:
    n_classes: int
    n_sites: int
    per_class: int
    image_size: int = 16
    correlation: float = 0.0
    tint_delta: float = 0.35
    noise: float = 0.05
    seed: int = 0
    patients_per_cell: int = 3

    def __post_init__(self) -> None:
        if not 1 <= self.n_classes <= MAX_CLASSES:
            raise ToyDataError(
                f"n_classes must be in [1, {MAX_CLASSES}], got {self.n_classes}"
            )
        if self.n_sites < 1:
            raise ToyDataError("need at least one site")
        if self.per_class < 1:
            raise ToyDataError("per_class must be positive")
        if not 0.0 <= self.correlation <= 1.0:
            raise ToyDataError("correlation must lie in [0, 1]")
        if self.image_size < 8:
            raise ToyDataError("images below 8px lose the shape signal")


def site_tint(site_index: int, n_sites: int, tint_delta: float) -> np.ndarray:
    """Per-channel multiplicative factors, spread around the hue circle."""
    theta = 2.0 * math.pi * site_index / n_sites
    return 1.0 + tint_delta * np.array([
        math.cos(theta),
        math.cos(theta - 2.0 * math.pi / 3.0),
        math.cos(theta + 2.0 * math.pi / 3.0),
    ])


def shape_mask(class_index: int, size: int, rng: np.random.Generator) -> np.ndarray:
    """Binary figure for a class, with small random jitter per image."""
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1)
    cx = 0.5 + rng.uniform(-0.10, 0.10)
    cy = 0.5 + rng.uniform(-0.10, 0.10)
    r = 0.30 + rng.uniform(-0.04, 0.04)
    if class_index == 0:  # disk
        return ((xx - cx) ** 2 + (yy - cy) ** 2 < r**2).astype(np.float64)
    if class_index == 1:  # horizontal stripes
        phase = rng.uniform(0.0, 1.0)
        return (np.floor((yy + phase) * 4) % 2).astype(np.float64)
    if class_index == 2:  # ring
        d2 = (xx - cx) ** 2 + (yy - cy) ** 2
        return ((d2 < r**2) & (d2 > (0.55 * r) ** 2)).astype(np.float64)
    if class_index == 3:  # checkerboard
        phase = rng.uniform(0.0, 1.0)
        return ((np.floor((xx + phase) * 3) + np.floor((yy + phase) * 3)) % 2
                ).astype(np.float64)
    if class_index == 4:  # cross
        w = 0.14 + rng.uniform(-0.03, 0.03)
        return ((np.abs(xx - cx) < w) | (np.abs(yy - cy) < w)).astype(np.float64)
    if class_index == 5:  # frame
        m = 0.16 + rng.uniform(-0.04, 0.04)
        outer = (np.abs(xx - 0.5) < 0.42) & (np.abs(yy - 0.5) < 0.42)
        inner = (np.abs(xx - 0.5) < 0.42 - m) & (np.abs(yy - 0.5) < 0.42 - m)
        return (outer & ~inner).astype(np.float64)
    if class_index == 6:  # diagonal half-plane
        b = rng.uniform(-0.10, 0.10)
        return (yy > xx + b).astype(np.float64)
    if class_index == 7:  # dot grid
        phase = rng.uniform(0.0, 0.25)
        gx = ((xx + phase) * 4) % 1.0
        gy = ((yy + phase) * 4) % 1.0
        return ((gx - 0.5) ** 2 + (gy - 0.5) ** 2 < 0.3**2).astype(np.float64)
    raise ToyDataError(f"no figure defined for class index {class_index}")


def render_patch(class_index: int, site_index: int, spec: ToyDatasetSpec,
                 rng: np.random.Generator) -> np.ndarray:
    """One (H, W, 3) uint8 image: tinted figure plus pixel noise."""
    mask = shape_mask(class_index, spec.image_size, rng)
    base = 0.30 + 0.40 * mask
    tint = site_tint(site_index, spec.n_sites, spec.tint_delta)
    img = base[:, :, None] * tint[None, None, :]
    img = img + rng.normal(0.0, spec.noise, img.shape)
    return (np.clip(img, 0.0, 1.0) * 255.0).round().astype(np.uint8)


def cell_counts(spec: ToyDatasetSpec) -> np.ndarray:
    """Deterministic (n_classes, n_sites) image counts.

    Class c concentrates ``correlation`` extra mass on site c mod n_sites,
    with the rest spread evenly; fractional shares resolve by largest
    remainder so the counts are exact for any per_class.
    """
    counts = np.zeros((spec.n_classes, spec.n_sites), dtype=np.int64)
    site_keys = [f"s{s}" for s in range(spec.n_sites)]
    for c in range(spec.n_classes):
        preferred = c % spec.n_sites
        weights = [
            (1.0 - spec.correlation) / spec.n_sites
            + (spec.correlation if s == preferred else 0.0)
            for s in range(spec.n_sites)
        ]
        counts[c] = largest_remainder(site_keys, weights, spec.per_class)
    return counts


def generate_toy_dataset(spec: ToyDatasetSpec, out_dir: str | Path,
                         ) -> DatasetManifest:
    """Write PNGs and a manifest; fully reproducible from the spec."""
    out_dir = Path(out_dir)
    images_dir = out_dir / "images"
    images_dir.mkdir(parents=True, exist_ok=True)

    rng = np.random.default_rng(spec.seed)
    counts = cell_counts(spec)
    records = []
    for c in range(spec.n_classes):
        cls = f"c{c}"
        for s in range(spec.n_sites):
            site = f"s{s}"
            for j in range(int(counts[c, s])):
                name = f"{cls}_{site}_{j:04d}.png"
                img = render_patch(c, s, spec, rng)
                Image.fromarray(img).save(images_dir / name)
                records.append(PatchRecord(
                    patch_id=name.removesuffix(".png"),
                    image_ref=name,
                    patient_id=f"pt_{cls}{site}_{j % spec.patients_per_cell}",
                    class_label=cls,
                    site=site,
                    race=f"r{j % 2}",
                    gender=f"g{(j // 2) % 2}",
                    age=35 + (j * 7) % 40,
                ))
    manifest = manifest_from_records(records, source=str(out_dir / "manifest.csv"))
    write_manifest(manifest, out_dir / "manifest.csv")
    return manifest


__all__ = [
    "MAX_CLASSES",
    "ToyDataError",
    "ToyDatasetSpec",
    "cell_counts",
    "generate_toy_dataset",
    "render_patch",
    "shape_mask",
    "site_tint",
]
