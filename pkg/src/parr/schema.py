"""Attribute vocabulary: named attributes, groups, and template-tag bindings.

The schema is the single source of truth for query validity: every binary
attribute query is checked against it, and the pseudo-description template
resolves its slots through the schema's tag bindings.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence, Union

import numpy as np

from .errors import InvalidQueryError, SchemaError


@dataclass(frozen=True)
class Attribute:
    name: str
    group: str


@dataclass(frozen=True)
class TagBinding:
    """One attribute index and the surface word it contributes to a slot."""

    index: int
    word: str


@dataclass(frozen=True)
class AttributeVector:
    """Binary attribute query/label, values in {0, 1}."""

    bits: tuple[int, ...]

    @classmethod
    def coerce(cls, value: "QueryLike") -> "AttributeVector":
        if isinstance(value, AttributeVector):
            return value
        bits = tuple(int(b) for b in np.asarray(value).reshape(-1))
        if any(b not in (0, 1) for b in bits):
            raise InvalidQueryError(f"attribute vector values must be 0/1, got {bits}")
        return cls(bits)

    def __len__(self) -> int:
        return len(self.bits)

    def active(self) -> tuple[int, ...]:
        return tuple(i for i, b in enumerate(self.bits) if b)

    def to_numpy(self, dtype=np.float64) -> np.ndarray:
        return np.asarray(self.bits, dtype=dtype)


QueryLike = Union[AttributeVector, Sequence[int], np.ndarray]


class AttributeSchema:
    """Ordered attribute list plus tag -> [(index, word)] bindings.

    Invariants enforced at construction: unique attribute names, every tag
    binds at least one in-range index, and no index is bound under two tags.
    """

    def __init__(
        self,
        attributes: Iterable[Attribute],
        tags: Mapping[str, Iterable[TagBinding]],
    ):
        self.attributes = tuple(attributes)
        self.tags = {t: tuple(bs) for t, bs in tags.items()}
        self._validate()
        self._word_by_index = {}
        for bindings in self.tags.values():
            for b in bindings:
                self._word_by_index[b.index] = b.word

    def _validate(self) -> None:
        names = [a.name for a in self.attributes]
        if len(set(names)) != len(names):
            raise SchemaError("attribute names must be unique")
        seen_indices: dict[int, str] = {}
        for tag, bindings in self.tags.items():
            if not bindings:
                raise SchemaError(f"tag {tag!r} binds no attributes")
            for b in bindings:
                if not (0 <= b.index < len(self.attributes)):
                    raise SchemaError(f"tag {tag!r} binds out-of-range index {b.index}")
                if b.index in seen_indices and seen_indices[b.index] != tag:
                    raise SchemaError(
                        f"attribute index {b.index} bound under both "
                        f"{seen_indices[b.index]!r} and {tag!r}"
                    )
                seen_indices[b.index] = tag

    @property
    def n_attr(self) -> int:
        return len(self.attributes)

    def has_tag(self, tag: str) -> bool:
        return tag in self.tags

    def bindings(self, tag: str) -> tuple[TagBinding, ...]:
        return self.tags[tag]

    def surface_word(self, index: int) -> str:
        """Word the attribute contributes to the template; name as fallback."""
        return self._word_by_index.get(index, self.attributes[index].name)

    def check_query(self, query: QueryLike) -> AttributeVector:
        vec = AttributeVector.coerce(query)
        if len(vec) != self.n_attr:
            raise InvalidQueryError(
                f"query length {len(vec)} does not match schema n_attr {self.n_attr}"
            )
        return vec

    # -- serialization ------------------------------------------------------

    def to_json_dict(self) -> dict:
        return {
            "attributes": [{"name": a.name, "group": a.group} for a in self.attributes],
            "tags": {
                tag: [{"index": b.index, "word": b.word} for b in bindings]
                for tag, bindings in self.tags.items()
            },
        }

    @classmethod
    def from_json_dict(cls, doc: Mapping) -> "AttributeSchema":
        try:
            attributes = [Attribute(a["name"], a["group"]) for a in doc["attributes"]]
            tags = {
                tag: [TagBinding(int(b["index"]), b["word"]) for b in bindings]
                for tag, bindings in doc["tags"].items()
            }
        except (KeyError, TypeError) as exc:
            raise SchemaError(f"malformed schema document: {exc}") from exc
        return cls(attributes, tags)

    def schema_hash(self) -> str:
        canonical = json.dumps(self.to_json_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    def __eq__(self, other) -> bool:
        return isinstance(other, AttributeSchema) and self.to_json_dict() == other.to_json_dict()


def save_schema(schema: AttributeSchema, path: Union[str, Path]) -> None:
    Path(path).write_text(json.dumps(schema.to_json_dict(), indent=2) + "\n")


def load_schema(path: Union[str, Path]) -> AttributeSchema:
    path = Path(path)
    if not path.exists():
        raise SchemaError(f"schema file not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError(f"schema file {path} is not valid JSON: {exc}") from exc
    return AttributeSchema.from_json_dict(doc)


def demo_schema_small() -> AttributeSchema:
    """Eight-attribute schema used by the synthetic end-to-end pipeline."""
    attributes = [
        Attribute("young", "age"),
        Attribute("woman", "gender"),
        Attribute("long hair", "hair"),
        Attribute("red upper", "upper color"),
        Attribute("t-shirt", "upper clothing"),
        Attribute("blue lower", "lower color"),
        Attribute("jeans", "lower clothing"),
        Attribute("hat", "accessory"),
    ]
    tags = {
        "age": [TagBinding(0, "young")],
        "gender": [TagBinding(1, "woman")],
        "hair length": [TagBinding(2, "long")],
        "upper color": [TagBinding(3, "red")],
        "upper clothing": [TagBinding(4, "t-shirt")],
        "lower color": [TagBinding(5, "blue")],
        "lower clothing": [TagBinding(6, "jeans")],
        "accessory": [TagBinding(7, "hat")],
    }
    return AttributeSchema(attributes, tags)


def demo_schema_full() -> AttributeSchema:
    """Thirteen-attribute schema covering every template slot, incl. optional ones."""
    attributes = [
        Attribute("young", "age"),
        Attribute("woman", "gender"),
        Attribute("side view", "camera angle"),
        Attribute("long hair", "hair"),
        Attribute("blue lower", "lower color"),
        Attribute("jeans", "lower clothing"),
        Attribute("white upper", "upper color"),
        Attribute("t-shirt", "upper clothing"),
        Attribute("short sleeves", "sleeves"),
        Attribute("floral motif", "motif"),
        Attribute("hat", "accessory"),
        Attribute("handbag", "bag"),
        Attribute("backpack", "bag"),
    ]
    tags = {
        "age": [TagBinding(0, "young")],
        "gender": [TagBinding(1, "woman")],
        "camera angle": [TagBinding(2, "side view")],
        "hair length": [TagBinding(3, "long")],
        "lower color": [TagBinding(4, "blue")],
        "lower clothing": [TagBinding(5, "jeans")],
        "upper color": [TagBinding(6, "white")],
        "upper clothing": [TagBinding(7, "t-shirt")],
        "sleeves length": [TagBinding(8, "short")],
        "motif": [TagBinding(9, "floral")],
        "accessory": [TagBinding(10, "hat")],
        "bag": [TagBinding(11, "handbag")],
        "backpack": [TagBinding(12, "backpack")],
    }
    return AttributeSchema(attributes, tags)
