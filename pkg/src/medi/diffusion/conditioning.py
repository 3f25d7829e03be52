"""Joint class and metadata conditioning.

A model conditions on the class label plus k metadata attributes. Each gets
its own embedding table; the concatenated vector must line up exactly with
the timestep embedding so the two can be summed:

    d_class + k * d_e == d_t

With k = 0 the class embedding spans the full width and the model reduces to
a class-only conditional baseline.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from ..registry import MetadataSchema


class ConditioningError(ValueError):
    pass


@dataclass(frozen=True)
class ConditioningSpec:
    """Embedding widths and vocabulary sizes for one trained model."""

    d_t: int
    d_class: int
    d_e: int
    n_classes: int
    attributes: tuple[str, ...]
    cardinalities: tuple[int, ...]

    def __post_init__(self) -> None:
        if len(self.attributes) != len(self.cardinalities):
            raise ConditioningError(
                f"{len(self.attributes)} attributes but "
                f"{len(self.cardinalities)} cardinalities"
            )
        if self.n_classes < 1:
            raise ConditioningError("need at least one class")
        if any(c < 1 for c in self.cardinalities):
            raise ConditioningError("attribute cardinalities must be positive")
        k = len(self.attributes)
        if self.d_class + k * self.d_e != self.d_t:
            raise ConditioningError(
                f"embedding widths must satisfy d_class + k*d_e == d_t, got "
                f"{self.d_class} + {k}*{self.d_e} = "
                f"{self.d_class + k * self.d_e} != {self.d_t}"
            )
        if self.d_class < 1:
            raise ConditioningError("d_class must be positive")
        if k > 0 and self.d_e < 1:
            raise ConditioningError("d_e must be positive when attributes are used")

    @property
    def k(self) -> int:
        return len(self.attributes)

    def to_dict(self) -> dict:
        return {
            "d_t": self.d_t,
            "d_class": self.d_class,
            "d_e": self.d_e,
            "n_classes": self.n_classes,
            "attributes": list(self.attributes),
            "cardinalities": list(self.cardinalities),
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "ConditioningSpec":
        return cls(
            d_t=payload["d_t"],
            d_class=payload["d_class"],
            d_e=payload["d_e"],
            n_classes=payload["n_classes"],
            attributes=tuple(payload["attributes"]),
            cardinalities=tuple(payload["cardinalities"]),
        )


def build_conditioning(schema: MetadataSchema, *, d_t: int, d_class: int,
                       d_e: int, attributes: tuple[str, ...] = ()) -> ConditioningSpec:
    """Derive a spec from a dataset schema and the chosen widths.

    ``attributes`` names the metadata fields the model conditions on, in
    order; the class label is always included.
    """
    cardinalities = tuple(len(schema.vocab(a)) for a in attributes)
    return ConditioningSpec(
        d_t=d_t,
        d_class=d_class,
        d_e=d_e,
        n_classes=len(schema.class_vocab),
        attributes=tuple(attributes),
        cardinalities=cardinalities,
    )


class EmbeddingTables(nn.Module):
    """Learnable class and per-attribute embeddings, concatenated to d_t."""

    def __init__(self, spec: ConditioningSpec):
        super().__init__()
        self.spec = spec
        self.class_embedding = nn.Embedding(spec.n_classes, spec.d_class)
        self.attribute_embeddings = nn.ModuleList(
            nn.Embedding(card, spec.d_e) for card in spec.cardinalities
        )
        for table in [self.class_embedding, *self.attribute_embeddings]:
            nn.init.normal_(table.weight, mean=0.0, std=0.02)

    def forward(self, class_ids: torch.Tensor,
                attribute_ids: torch.Tensor | None = None) -> torch.Tensor:
        """Conditioning vectors for a batch.

        ``class_ids`` has shape (B,); ``attribute_ids`` has shape (B, k) in
        the spec's attribute order, and may be omitted only when k == 0.
        """
        spec = self.spec
        if class_ids.ndim != 1:
            raise ConditioningError("class_ids must be 1-d")
        self._check_range(class_ids, spec.n_classes, "class")
        if spec.k == 0:
            if attribute_ids is not None and attribute_ids.numel() > 0:
                raise ConditioningError(
                    "attribute ids given but the spec conditions on none"
                )
            return self.class_embedding(class_ids)
        if attribute_ids is None:
            raise ConditioningError(
                f"spec conditions on {spec.k} attributes but none were given"
            )
        if attribute_ids.shape != (class_ids.shape[0], spec.k):
            raise ConditioningError(
                f"attribute_ids must have shape ({class_ids.shape[0]}, {spec.k}), "
                f"got {tuple(attribute_ids.shape)}"
            )
        parts = [self.class_embedding(class_ids)]
        for i, (name, table) in enumerate(zip(spec.attributes,
                                              self.attribute_embeddings)):
            ids = attribute_ids[:, i]
            self._check_range(ids, spec.cardinalities[i], name)
            parts.append(table(ids))
        return torch.cat(parts, dim=-1)

    @staticmethod
    def _check_range(ids: torch.Tensor, cardinality: int, name: str) -> None:
        if ids.numel() and (bool((ids < 0).any()) or bool((ids >= cardinality).any())):
            raise ConditioningError(
                f"{name} ids must lie in [0, {cardinality}), got "
                f"[{int(ids.min())}, {int(ids.max())}]"
            )


def combine_with_timestep(z_t: torch.Tensor, z_cond: torch.Tensor) -> torch.Tensor:
    """Sum the timestep and conditioning embeddings, verifying widths."""
    if z_t.shape != z_cond.shape:
        raise ConditioningError(
            f"timestep embedding {tuple(z_t.shape)} and conditioning "
            f"{tuple(z_cond.shape)} must match exactly"
        )
    return z_t + z_cond


__all__ = [
    "ConditioningError",
    "ConditioningSpec",
    "EmbeddingTables",
    "build_conditioning",
    "combine_with_timestep",
]
