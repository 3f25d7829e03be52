"""Dataset manifests, metadata vocabularies, and coverage statistics.

A manifest is a flat CSV table with one row per image patch. The registry
parses it into :class:`PatchRecord` objects, builds deterministic vocabularies
for every categorical attribute, and exposes the class/metadata coverage
counts that the split engine and the sampling planners consume.
"""

from __future__ import annotations

import csv
import hashlib
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Iterator, Mapping, Sequence

import numpy as np

UNKNOWN = "UNKNOWN"

#: Categorical attributes that can carry conditioning information.
METADATA_ATTRIBUTES = ("site", "race", "gender")

#: Columns every manifest must declare, in canonical order.
REQUIRED_COLUMNS = (
    "patch_id",
    "image_ref",
    "patient_id",
    "class",
    "site",
    "race",
    "gender",
    "age",
)

#: Optional column marking generated rows; absent means all rows are real.
SYNTHETIC_COLUMN = "synthetic"


class ManifestError(ValueError):
    """Raised when a manifest file or record violates the registry contract."""


@dataclass(frozen=True)
class PatchRecord:
    """One image patch with its class label and metadata attribute values.

    ``class_label`` and ``site`` are always concrete; ``race`` and ``gender``
    fall back to the UNKNOWN sentinel and ``age`` to ``None`` when the source
    row left them empty.
    """

    patch_id: str
    image_ref: str
    patient_id: str
    class_label: str
    site: str
    race: str = UNKNOWN
    gender: str = UNKNOWN
    age: int | None = None
    synthetic: bool = False

    def __post_init__(self) -> None:
        for name in ("patch_id", "patient_id", "class_label", "site"):
            if not getattr(self, name):
                raise ManifestError(f"PatchRecord field {name!r} must be non-empty")

    def attribute(self, name: str) -> str:
        """Return the categorical value of ``class`` or a metadata attribute."""
        if name == "class":
            return self.class_label
        if name in METADATA_ATTRIBUTES:
            return getattr(self, name)
        raise ManifestError(f"unknown categorical attribute {name!r}")


@dataclass(frozen=True)
class Vocabulary:
    """Ordered categorical vocabulary mapping value <-> integer id.

    Values are sorted lexicographically with the UNKNOWN sentinel reserved as
    the last id when present, so id assignments are stable across reloads.
    """

    values: tuple[str, ...]

    @classmethod
    def from_values(cls, observed: Iterable[str]) -> "Vocabulary":
        unique = set(observed)
        has_unknown = UNKNOWN in unique
        ordered = sorted(unique - {UNKNOWN})
        if has_unknown:
            ordered.append(UNKNOWN)
        return cls(values=tuple(ordered))

    def __len__(self) -> int:
        return len(self.values)

    def __contains__(self, value: str) -> bool:
        return value in self._index

    def __iter__(self) -> Iterator[str]:
        return iter(self.values)

    @property
    def _index(self) -> dict[str, int]:
        cached = self.__dict__.get("_index_cache")
        if cached is None:
            cached = {v: i for i, v in enumerate(self.values)}
            object.__setattr__(self, "_index_cache", cached)
        return cached

    def id_of(self, value: str) -> int:
        try:
            return self._index[value]
        except KeyError:
            raise ManifestError(f"value {value!r} not in vocabulary") from None

    def value_of(self, idx: int) -> str:
        if not 0 <= idx < len(self.values):
            raise ManifestError(
                f"id {idx} out of range for vocabulary of size {len(self.values)}"
            )
        return self.values[idx]


@dataclass(frozen=True)
class MetadataSchema:
    """Vocabularies for the class label and every metadata attribute."""

    class_vocab: Vocabulary
    attribute_vocabs: tuple[tuple[str, Vocabulary], ...]

    @classmethod
    def from_records(cls, records: Sequence[PatchRecord]) -> "MetadataSchema":
        class_vocab = Vocabulary.from_values(r.class_label for r in records)
        attrs = tuple(
            (name, Vocabulary.from_values(r.attribute(name) for r in records))
            for name in METADATA_ATTRIBUTES
        )
        return cls(class_vocab=class_vocab, attribute_vocabs=attrs)

    @property
    def attribute_names(self) -> tuple[str, ...]:
        return tuple(name for name, _ in self.attribute_vocabs)

    @property
    def attribute_count(self) -> int:
        return len(self.attribute_vocabs)

    def vocab(self, name: str) -> Vocabulary:
        if name == "class":
            return self.class_vocab
        for attr, vocab in self.attribute_vocabs:
            if attr == name:
                return vocab
        raise ManifestError(f"unknown attribute {name!r}; known: class, "
                            + ", ".join(self.attribute_names))

    def cardinality(self, name: str) -> int:
        return len(self.vocab(name))

    def cardinalities(self) -> dict[str, int]:
        out = {"class": len(self.class_vocab)}
        for name, vocab in self.attribute_vocabs:
            out[name] = len(vocab)
        return out

    def fingerprint(self) -> str:
        """Content hash of all vocabularies; checkpoints embed this so a
        sampler can refuse conditioning ids minted under a different schema."""
        h = hashlib.sha256()
        h.update(b"class\x00" + "\x00".join(self.class_vocab.values).encode())
        for name, vocab in self.attribute_vocabs:
            h.update(b"\x01" + name.encode() + b"\x00" + "\x00".join(vocab.values).encode())
        return h.hexdigest()[:16]


@dataclass
class DatasetManifest:
    """A list of patch records plus the schema their ids are minted under.

    Subsets produced by :meth:`restrict` keep the parent schema so conditioning
    ids stay stable across splits.
    """

    records: tuple[PatchRecord, ...]
    schema: MetadataSchema
    source: str | None = None

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[PatchRecord]:
        return iter(self.records)

    def restrict(self, predicate: Callable[[PatchRecord], bool]) -> "DatasetManifest":
        kept = tuple(r for r in self.records if predicate(r))
        return DatasetManifest(records=kept, schema=self.schema, source=self.source)

    def class_counts(self) -> Counter:
        return Counter(r.class_label for r in self.records)

    def sites(self) -> set[str]:
        return {r.site for r in self.records}


@dataclass(frozen=True, eq=False)
class CoverageMatrix:
    """Patch counts per (class label, metadata attribute value) pair."""

    attribute: str
    classes: tuple[str, ...]
    values: tuple[str, ...]
    counts: np.ndarray = field(repr=False)

    def total(self) -> int:
        return int(self.counts.sum())

    def cell(self, class_label: str, value: str) -> int:
        return int(self.counts[self.classes.index(class_label), self.values.index(value)])

    def write_csv(self, path: Path | str) -> None:
        path = Path(path)
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["class"] + list(self.values))
            for i, cls in enumerate(self.classes):
                writer.writerow([cls] + [int(c) for c in self.counts[i]])


@dataclass(frozen=True)
class DatasetStats:
    n_patches: int
    n_patients: int
    per_class: dict[str, int]
    cardinalities: dict[str, int]

    def to_dict(self) -> dict:
        return {
            "n_patches": self.n_patches,
            "n_patients": self.n_patients,
            "per_class": dict(sorted(self.per_class.items())),
            "cardinalities": dict(sorted(self.cardinalities.items())),
        }


def _parse_row(row: dict[str, str], line_no: int) -> PatchRecord:
    def clean(name: str) -> str:
        value = row.get(name)
        return value.strip() if value is not None else ""

    for name in ("patch_id", "image_ref", "patient_id", "class", "site"):
        if not clean(name):
            raise ManifestError(f"line {line_no}: required field {name!r} is empty")

    age_raw = clean("age")
    age: int | None
    if age_raw in ("", UNKNOWN):
        age = None
    else:
        try:
            age = int(age_raw)
        except ValueError:
            raise ManifestError(
                f"line {line_no}: age must be an integer or empty, got {age_raw!r}"
            ) from None

    syn_raw = clean(SYNTHETIC_COLUMN).lower()
    if syn_raw in ("", "false", "0"):
        synthetic = False
    elif syn_raw in ("true", "1"):
        synthetic = True
    else:
        raise ManifestError(f"line {line_no}: synthetic must be true/false, got {syn_raw!r}")

    return PatchRecord(
        patch_id=clean("patch_id"),
        image_ref=clean("image_ref"),
        patient_id=clean("patient_id"),
        class_label=clean("class"),
        site=clean("site"),
        race=clean("race") or UNKNOWN,
        gender=clean("gender") or UNKNOWN,
        age=age,
        synthetic=synthetic,
    )


def manifest_from_records(records: Sequence[PatchRecord],
                          source: str | None = None) -> DatasetManifest:
    """Build a manifest (and its schema) from already-parsed records."""
    seen: set[str] = set()
    for r in records:
        if r.patch_id in seen:
            raise ManifestError(f"duplicate patch_id {r.patch_id!r}")
        seen.add(r.patch_id)
    return DatasetManifest(
        records=tuple(records),
        schema=MetadataSchema.from_records(records),
        source=source,
    )


def load_manifest(path: Path | str) -> DatasetManifest:
    """Parse a manifest CSV into records plus a schema of observed values.

    Raises :class:`ManifestError` naming the offending line for malformed
    rows, duplicates, or missing required columns.
    """
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"manifest file not found: {path}")

    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in REQUIRED_COLUMNS if c not in header]
        if missing:
            raise ManifestError(
                f"manifest {path} is missing required columns: {', '.join(missing)}"
            )
        records: list[PatchRecord] = []
        seen: set[str] = set()
        for line_no, row in enumerate(reader, start=2):
            if None in row and row[None]:
                raise ManifestError(f"line {line_no}: row has more fields than the header")
            record = _parse_row(row, line_no)
            if record.patch_id in seen:
                raise ManifestError(f"line {line_no}: duplicate patch_id {record.patch_id!r}")
            seen.add(record.patch_id)
            records.append(record)

    return DatasetManifest(
        records=tuple(records),
        schema=MetadataSchema.from_records(records),
        source=str(path),
    )


def write_manifest(manifest: DatasetManifest | Sequence[PatchRecord],
                   path: Path | str) -> None:
    """Write records back to the flat CSV format accepted by load_manifest."""
    records = manifest.records if isinstance(manifest, DatasetManifest) else tuple(manifest)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    include_synthetic = any(r.synthetic for r in records)
    columns = list(REQUIRED_COLUMNS) + ([SYNTHETIC_COLUMN] if include_synthetic else [])
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for r in records:
            row = [
                r.patch_id,
                r.image_ref,
                r.patient_id,
                r.class_label,
                r.site,
                r.race,
                r.gender,
                "" if r.age is None else str(r.age),
            ]
            if include_synthetic:
                row.append("true" if r.synthetic else "false")
            writer.writerow(row)


def coverage_matrix(manifest: DatasetManifest, meta_attr: str) -> CoverageMatrix:
    """Count patches for every (class, attribute value) pair.

    The matrix spans the full schema vocabularies, so absent combinations show
    up as explicit zero cells.
    """
    if meta_attr not in manifest.schema.attribute_names:
        raise ManifestError(
            f"unknown attribute {meta_attr!r}; known: "
            + ", ".join(manifest.schema.attribute_names)
        )
    classes = manifest.schema.class_vocab.values
    values = manifest.schema.vocab(meta_attr).values
    counts = np.zeros((len(classes), len(values)), dtype=np.int64)
    class_idx = {c: i for i, c in enumerate(classes)}
    value_idx = {v: j for j, v in enumerate(values)}
    for r in manifest.records:
        counts[class_idx[r.class_label], value_idx[r.attribute(meta_attr)]] += 1
    return CoverageMatrix(attribute=meta_attr, classes=classes, values=values, counts=counts)


def summarize(manifest: DatasetManifest) -> DatasetStats:
    """Patient/patch totals, per-class counts, and attribute cardinalities."""
    return DatasetStats(
        n_patches=len(manifest),
        n_patients=len({r.patient_id for r in manifest.records}),
        per_class=dict(manifest.class_counts()),
        cardinalities=manifest.schema.cardinalities(),
    )


__all__ = [
    "UNKNOWN",
    "METADATA_ATTRIBUTES",
    "REQUIRED_COLUMNS",
    "ManifestError",
    "PatchRecord",
    "Vocabulary",
    "MetadataSchema",
    "DatasetManifest",
    "CoverageMatrix",
    "DatasetStats",
    "manifest_from_records",
    "load_manifest",
    "write_manifest",
    "coverage_matrix",
    "summarize",
]
