"""Event-type ontology: loading, validation, filtering and hierarchy queries.

The on-disk format is JSON lines with two record kinds::

    {"kind": "type", "type_id": "Q1", "name": "payment", "definition": "...", "parent_id": "Q0"}
    {"kind": "mapping", "roleset_id": "pay.01", "candidate_type_ids": ["Q1", "Q2"]}
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from types import MappingProxyType
from typing import Iterable, Mapping, Sequence

logger = logging.getLogger(__name__)

RELATIONS = ("same", "child", "parent", "sibling", "unrelated")


class OntologyError(Exception):
    pass


class OntologyParseError(OntologyError):
    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class OntologyValidationError(OntologyError):
    def __init__(self, message: str, ids: Iterable[str] = ()):
        self.ids = sorted(set(ids))
        super().__init__(f"{message}: {', '.join(self.ids)}" if self.ids else message)


class OntologyCycleError(OntologyValidationError):
    pass


@dataclass(frozen=True)
class EventType:
    type_id: str
    name: str
    definition: str
    parent_id: str | None = None

    def to_record(self) -> dict:
        rec = {"kind": "type", "type_id": self.type_id, "name": self.name,
               "definition": self.definition}
        if self.parent_id is not None:
            rec["parent_id"] = self.parent_id
        return rec


@dataclass(frozen=True)
class RolesetMapping:
    roleset_id: str
    candidate_type_ids: tuple[str, ...]

    @property
    def is_clean(self) -> bool:
        return len(self.candidate_type_ids) == 1

    @property
    def predicate(self) -> str:
        return predicate_of(self.roleset_id)

    def to_record(self) -> dict:
        return {"kind": "mapping", "roleset_id": self.roleset_id,
                "candidate_type_ids": list(self.candidate_type_ids)}


@dataclass(frozen=True)
class FilterRules:
    deny_types: frozenset[str] = frozenset()
    deny_rolesets: frozenset[str] = frozenset()
    min_mentions: int = 0

    @classmethod
    def from_dict(cls, doc: Mapping) -> "FilterRules":
        return cls(
            deny_types=frozenset(doc.get("deny_types", ())),
            deny_rolesets=frozenset(doc.get("deny_rolesets", ())),
            min_mentions=int(doc.get("min_mentions", 0)),
        )

    @classmethod
    def load(cls, path: str | Path) -> "FilterRules":
        with open(path, encoding="utf-8") as f:
            return cls.from_dict(json.load(f))

    def is_empty(self) -> bool:
        return not self.deny_types and not self.deny_rolesets and self.min_mentions <= 0


def predicate_of(roleset_id: str) -> str:
    """``"pay.01"`` -> ``"pay"``; ids without a sense suffix are their own predicate."""
    return roleset_id.rsplit(".", 1)[0]


@dataclass(frozen=True)
class Ontology:
    """Immutable, validated collection of event types and roleset mappings."""

    types: Mapping[str, EventType]
    mappings: Mapping[str, RolesetMapping]
    _children: Mapping[str, tuple[str, ...]] = field(default=None, repr=False, compare=False)
    _by_predicate: Mapping[str, tuple[str, ...]] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "types", MappingProxyType(dict(self.types)))
        object.__setattr__(self, "mappings", MappingProxyType(dict(self.mappings)))
        children: dict[str, list[str]] = {}
        for t in self.types.values():
            if t.parent_id is not None:
                children.setdefault(t.parent_id, []).append(t.type_id)
        object.__setattr__(self, "_children",
                           MappingProxyType({k: tuple(sorted(v)) for k, v in children.items()}))
        by_pred: dict[str, list[str]] = {}
        for rid in self.mappings:
            by_pred.setdefault(predicate_of(rid), []).append(rid)
        object.__setattr__(self, "_by_predicate",
                           MappingProxyType({k: tuple(sorted(v)) for k, v in by_pred.items()}))

    @property
    def type_ids(self) -> list[str]:
        return sorted(self.types)

    def get_type(self, type_id: str) -> EventType:
        try:
            return self.types[type_id]
        except KeyError:
            raise KeyError(f"unknown event type {type_id!r}") from None

    def candidates(self, roleset_id: str) -> tuple[str, ...]:
        return self.mappings[roleset_id].candidate_type_ids

    def children(self, type_id: str) -> tuple[str, ...]:
        return self._children.get(type_id, ())

    def rolesets_with_predicate(self, predicate: str) -> tuple[str, ...]:
        return self._by_predicate.get(predicate, ())

    def validate(self) -> None:
        _validate(self.types, self.mappings)

    def to_records(self) -> list[dict]:
        recs = [self.types[k].to_record() for k in sorted(self.types)]
        recs += [self.mappings[k].to_record() for k in sorted(self.mappings)]
        return recs

    def dumps(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.to_records())

    def save(self, path: str | Path) -> None:
        from cedar.io import atomic_write_text

        atomic_write_text(path, self.dumps())


def _validate(types: Mapping[str, EventType], mappings: Mapping[str, RolesetMapping]) -> None:
    empty = [t.type_id for t in types.values() if not t.definition.strip()]
    if empty:
        raise OntologyValidationError("event types with empty definition", empty)

    dangling = {t.parent_id for t in types.values()
                if t.parent_id is not None and t.parent_id not in types}
    for m in mappings.values():
        if not m.candidate_type_ids:
            raise OntologyValidationError("mapping without candidates", [m.roleset_id])
        if len(set(m.candidate_type_ids)) != len(m.candidate_type_ids):
            raise OntologyValidationError("mapping with duplicate candidates", [m.roleset_id])
        dangling.update(c for c in m.candidate_type_ids if c not in types)
    if dangling:
        raise OntologyValidationError("unresolved type ids", dangling)

    cycle = _find_cycle(types)
    if cycle:
        raise OntologyCycleError("cycle in parent graph", cycle)


def _find_cycle(types: Mapping[str, EventType]) -> list[str]:
    # each node has at most one parent, so walking up finds any cycle
    state: dict[str, int] = {}  # 1 = on current path, 2 = done
    for start in types:
        path = []
        node = start
        while node is not None and state.get(node) is None:
            state[node] = 1
            path.append(node)
            node = types[node].parent_id
        if node is not None and state.get(node) == 1:
            return path[path.index(node):]
        for p in path:
            state[p] = 2
    return []


def parse_ontology(lines: Iterable[str]) -> Ontology:
    types: dict[str, EventType] = {}
    mappings: dict[str, RolesetMapping] = {}
    duplicates = []
    for line_no, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as e:
            raise OntologyParseError(line_no, f"invalid JSON ({e.msg})") from None
        if not isinstance(rec, dict):
            raise OntologyParseError(line_no, "record is not an object")
        kind = rec.get("kind")
        try:
            if kind == "type":
                parent = rec.get("parent_id")
                if isinstance(parent, list):
                    if len(parent) > 1:
                        logger.warning("type %s lists %d parents; keeping %s",
                                       rec["type_id"], len(parent), parent[0])
                    parent = parent[0] if parent else None
                t = EventType(str(rec["type_id"]), str(rec["name"]),
                              str(rec["definition"]), parent)
                if t.type_id in types:
                    duplicates.append(t.type_id)
                types[t.type_id] = t
            elif kind == "mapping":
                cands = rec["candidate_type_ids"]
                if not isinstance(cands, list):
                    raise OntologyParseError(line_no, "candidate_type_ids must be a list")
                m = RolesetMapping(str(rec["roleset_id"]), tuple(str(c) for c in cands))
                if m.roleset_id in mappings:
                    duplicates.append(m.roleset_id)
                mappings[m.roleset_id] = m
            else:
                raise OntologyParseError(line_no, f"unknown record kind {kind!r}")
        except KeyError as e:
            raise OntologyParseError(line_no, f"{kind} record missing field {e.args[0]!r}") from None
    if duplicates:
        raise OntologyValidationError("duplicate ids", duplicates)
    _validate(types, mappings)
    return Ontology(types, mappings)


def load_ontology(source: str | Path | Iterable[str]) -> Ontology:
    """Load and validate an ontology from a JSON-lines path or an iterable of lines."""
    if isinstance(source, (str, Path)):
        with open(source, encoding="utf-8") as f:
            return parse_ontology(f)
    return parse_ontology(source)


def filter_ontology(ont: Ontology, rules: FilterRules,
                    mention_counts: Mapping[str, int] | None = None) -> Ontology:
    """Apply deny-lists and the per-roleset mention threshold.

    Rolesets missing from ``mention_counts`` count as having zero mentions.
    Children of a removed type are re-attached to its nearest surviving ancestor.
    """
    if rules.is_empty():
        return ont
    if rules.min_mentions > 0 and mention_counts is None:
        raise ValueError("min_mentions requires mention_counts")

    def surviving_parent(parent: str | None) -> str | None:
        while parent is not None and parent in rules.deny_types:
            parent = ont.types[parent].parent_id
        return parent

    types = {}
    for tid, t in ont.types.items():
        if tid in rules.deny_types:
            continue
        parent = surviving_parent(t.parent_id)
        types[tid] = t if parent == t.parent_id else EventType(t.type_id, t.name, t.definition, parent)

    mappings = {}
    for rid, m in ont.mappings.items():
        if rid in rules.deny_rolesets:
            continue
        if rules.min_mentions > 0 and mention_counts.get(rid, 0) < rules.min_mentions:
            continue
        cands = tuple(c for c in m.candidate_type_ids if c in types)
        if not cands:
            continue
        mappings[rid] = m if cands == m.candidate_type_ids else RolesetMapping(rid, cands)
    return Ontology(types, mappings)


def hierarchy_relation(ont: Ontology, a: str, b: str) -> str:
    """Relation of ``b`` (gold) relative to ``a`` (prediction), one edge deep.

    ``"child"`` means b is a direct child of a. Root nodes are never siblings.
    """
    ta, tb = ont.get_type(a), ont.get_type(b)
    if a == b:
        return "same"
    if tb.parent_id == a:
        return "child"
    if ta.parent_id == b:
        return "parent"
    if ta.parent_id is not None and ta.parent_id == tb.parent_id:
        return "sibling"
    return "unrelated"


def type_ids_for_rolesets(ont: Ontology, roleset_ids: Sequence[str]) -> set[str]:
    out: set[str] = set()
    for rid in roleset_ids:
        if rid in ont.mappings:
            out.update(ont.mappings[rid].candidate_type_ids)
    return out
