"""Attribute taxonomy: categories -> attributes -> normalized value sets.

The taxonomy is the retrieval corpus. Every (category, attribute) pair
carries its file-ordered list of normalized values plus one synthesized
null entry (reserved id ``__null__``, surface text ``null``) appended at
load time. Instances are treated as immutable after construction.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import TaxonomyError

NULL_VALUE_ID = "__null__"
NULL_VALUE_TEXT = "null"


@dataclass(frozen=True)
class ValueEntry:
    """One candidate value of a (category, attribute) pair."""

    value_id: str
    text: str
    is_null: bool = False


@dataclass(frozen=True)
class TaxonomyStats:
    n_categories: int
    n_attributes: int
    n_ca_pairs: int
    n_cav_tuples: int


@dataclass
class Taxonomy:
    """Mapping from (category_id, attribute_id) to its ordered value entries.

    ``entries`` preserves insertion order (file order for loaded
    taxonomies); each value list keeps non-null values in file order with
    the synthesized null entry last.
    """

    entries: dict[tuple[str, str], list[ValueEntry]] = field(default_factory=dict)

    def pairs(self) -> list[tuple[str, str]]:
        return list(self.entries.keys())

    def has_pair(self, category: str, attribute: str) -> bool:
        return (category, attribute) in self.entries

    def attributes_of(self, category: str) -> list[str]:
        return [a for (c, a) in self.entries if c == category]

    def categories(self) -> list[str]:
        seen: dict[str, None] = {}
        for c, _ in self.entries:
            seen.setdefault(c)
        return list(seen)

    def null_entry(self, category: str, attribute: str) -> ValueEntry:
        for entry in self._pair(category, attribute):
            if entry.is_null:
                return entry
        raise TaxonomyError(f"pair ({category}, {attribute}) has no null entry")

    def value_ids(self, category: str, attribute: str) -> set[str]:
        return {e.value_id for e in self._pair(category, attribute) if not e.is_null}

    def _pair(self, category: str, attribute: str) -> list[ValueEntry]:
        try:
            return self.entries[(category, attribute)]
        except KeyError:
            raise TaxonomyError(f"unknown pair ({category}, {attribute})") from None


def make_null_entry() -> ValueEntry:
    return ValueEntry(value_id=NULL_VALUE_ID, text=NULL_VALUE_TEXT, is_null=True)


def build_pair(values: list[str]) -> list[ValueEntry]:
    """Value texts (in order) -> entries with the null synthesized last.

    Value ids are the texts themselves; the file format carries only
    surface strings, which are unique within a pair by contract.
    """
    out = [ValueEntry(value_id=v, text=v) for v in values]
    out.append(make_null_entry())
    return out


def load_taxonomy(path: str | Path) -> Taxonomy:
    """Load a taxonomy from JSONL: one {category, attribute, values} per line."""
    entries: dict[tuple[str, str], list[ValueEntry]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            raw = raw.strip()
            if not raw:
                continue
            try:
                obj = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise TaxonomyError(f"invalid JSON: {exc.msg}", line=lineno) from None
            if not isinstance(obj, dict) or set(obj) != {"category", "attribute", "values"}:
                raise TaxonomyError(
                    "expected object with exactly the fields category, attribute, values",
                    line=lineno,
                )
            category, attribute, values = obj["category"], obj["attribute"], obj["values"]
            if not isinstance(category, str) or not category:
                raise TaxonomyError("category must be a non-empty string", line=lineno)
            if not isinstance(attribute, str) or not attribute:
                raise TaxonomyError("attribute must be a non-empty string", line=lineno)
            if not isinstance(values, list) or not values:
                raise TaxonomyError("values must be a non-empty array", line=lineno)
            key = (category, attribute)
            if key in entries:
                raise TaxonomyError(f"duplicate pair ({category}, {attribute})", line=lineno)
            seen: set[str] = set()
            for v in values:
                if not isinstance(v, str) or not v:
                    raise TaxonomyError("values must be non-empty strings", line=lineno)
                if v == NULL_VALUE_ID:
                    raise TaxonomyError(
                        f"value text {NULL_VALUE_ID!r} is reserved", line=lineno
                    )
                if v in seen:
                    raise TaxonomyError(
                        f"duplicate value {v!r} in pair ({category}, {attribute})",
                        line=lineno,
                    )
                seen.add(v)
            entries[key] = build_pair(values)
    return Taxonomy(entries=entries)


def save_taxonomy(t: Taxonomy, path: str | Path) -> None:
    """Write the JSONL form (null entries are synthesized, never written)."""
    with open(path, "w", encoding="utf-8") as fh:
        for (category, attribute), values in t.entries.items():
            obj = {
                "category": category,
                "attribute": attribute,
                "values": [e.text for e in values if not e.is_null],
            }
            fh.write(json.dumps(obj, ensure_ascii=False, sort_keys=True) + "\n")


def validate_taxonomy(t: Taxonomy) -> list[str]:
    """Return human-readable invariant violations (empty list = valid)."""
    violations: list[str] = []
    for (category, attribute), values in t.entries.items():
        pair = f"({category}, {attribute})"
        if not category or not attribute:
            violations.append(f"{pair}: empty category or attribute identifier")
        nulls = [e for e in values if e.is_null]
        if len(nulls) != 1:
            violations.append(f"{pair}: expected exactly one null entry, found {len(nulls)}")
        non_null = [e for e in values if not e.is_null]
        if not non_null:
            violations.append(f"{pair}: no non-null values")
        texts = [e.text for e in non_null]
        if len(set(texts)) != len(texts):
            dupes = sorted({v for v in texts if texts.count(v) > 1})
            violations.append(f"{pair}: duplicate value texts {dupes}")
        ids = [e.value_id for e in non_null]
        if len(set(ids)) != len(ids):
            violations.append(f"{pair}: duplicate value ids")
        if any(e.value_id == NULL_VALUE_ID for e in non_null):
            violations.append(f"{pair}: non-null entry uses reserved id {NULL_VALUE_ID!r}")
    return violations


def candidate_values(
    t: Taxonomy, category: str, attribute: str, include_null: bool
) -> list[ValueEntry]:
    """Non-null entries in load order, with the null appended iff requested."""
    values = t._pair(category, attribute)
    out = [e for e in values if not e.is_null]
    if include_null:
        out.append(t.null_entry(category, attribute))
    return out


def taxonomy_stats(t: Taxonomy) -> TaxonomyStats:
    """Counts excluding synthesized null entries."""
    categories: set[str] = set()
    attributes: set[str] = set()
    cav = 0
    for (category, attribute), values in t.entries.items():
        categories.add(category)
        attributes.add(attribute)
        cav += sum(1 for e in values if not e.is_null)
    return TaxonomyStats(
        n_categories=len(categories),
        n_attributes=len(attributes),
        n_ca_pairs=len(t.entries),
        n_cav_tuples=cav,
    )
