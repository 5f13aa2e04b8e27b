"""Relation → meta-category taxonomy of the VSR benchmark."""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

META_CATEGORIES = (
    "Adjacency", "Directional", "Orientation", "Projective", "Proximity", "Topological", "Unallocated",
)


class UnknownRelationError(KeyError):
    pass


@dataclass(frozen=True)
class RelationTaxonomy:
    mapping: dict[str, str]

    def __post_init__(self):
        bad = set(self.mapping.values()) - set(META_CATEGORIES)
        if bad:
            raise ValueError(f"unknown meta-categories {sorted(bad)}")

    def __contains__(self, relation: str) -> bool:
        return relation in self.mapping

    def __call__(self, relation: str) -> str:
        return self.meta_category(relation)

    def meta_category(self, relation: str) -> str:
        try:
            return self.mapping[relation]
        except KeyError:
            raise UnknownRelationError(f"relation {relation!r} is not in the taxonomy") from None

    def relations(self, meta_category: str | None = None) -> list[str]:
        return [r for r, c in self.mapping.items() if meta_category is None or c == meta_category]

    @classmethod
    def from_json(cls, obj: dict) -> "RelationTaxonomy":
        mapping: dict[str, str] = {}
        for cat, entry in obj["meta_categories"].items():
            for rel in entry["relations"]:
                if rel in mapping:
                    raise ValueError(f"relation {rel!r} listed under {mapping[rel]} and {cat}")
                mapping[rel] = cat
        return cls(mapping)

    @classmethod
    def load(cls, path: str | Path | None = None) -> "RelationTaxonomy":
        if path is None:
            text = resources.files("spatial_mtl.data").joinpath("taxonomy.json").read_text()
        else:
            text = Path(path).read_text()
        return cls.from_json(json.loads(text))


_DEFAULT: RelationTaxonomy | None = None


def default_taxonomy() -> RelationTaxonomy:
    global _DEFAULT
    if _DEFAULT is None:
        _DEFAULT = RelationTaxonomy.load()
    return _DEFAULT
