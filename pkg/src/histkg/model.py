"""Entities, relations and the id-indexed knowledge graph that holds them."""

from __future__ import annotations

import copy
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Iterator

from .ontology import (
    UNDEFINED,
    EntityKind,
    RelationKind,
    check_entity,
    check_relation,
    parse_entity_kind,
    parse_relation_kind,
)


@dataclass
class Entity:
    id: int
    kinds: frozenset[EntityKind]
    # kind-indexed so a Location+Organization node keeps both natures
    attributes: dict[EntityKind, dict[str, str | None]]
    summaries: list[str] = field(default_factory=list)
    origin_references: list[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.kinds = frozenset(self.kinds)

    @property
    def primary_kind(self) -> EntityKind:
        """Deterministic representative kind (Organization for dual nodes)."""
        for kind in (EntityKind.INDIVIDUAL, EntityKind.EVENT, EntityKind.ORGANIZATION, EntityKind.LOCATION):
            if kind in self.kinds:
                return kind
        raise ValueError("entity without kinds")

    @property
    def name(self) -> str:
        if EntityKind.INDIVIDUAL in self.kinds:
            attrs = self.attributes[EntityKind.INDIVIDUAL]
            return f"{attrs.get('firstName') or ''} {attrs.get('lastName') or ''}".strip()
        return self.attributes[self.primary_kind].get("name") or ""

    def nature(self, kind: EntityKind) -> str:
        attrs = self.attributes.get(kind) or {}
        return attrs.get("nature") or UNDEFINED

    @property
    def date(self) -> str | None:
        attrs = self.attributes.get(EntityKind.EVENT) or {}
        return attrs.get("date")

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "kinds": sorted(k.value for k in self.kinds),
            "attributes": {
                k.value: dict(sorted(v.items())) for k, v in sorted(self.attributes.items(), key=lambda kv: kv[0].value)
            },
            "summaries": list(self.summaries),
            "origin_references": list(self.origin_references),
        }

    @classmethod
    def from_dict(cls, data: dict) -> Entity:
        return cls(
            id=int(data["id"]),
            kinds=frozenset(parse_entity_kind(k) for k in data["kinds"]),
            attributes={parse_entity_kind(k): dict(v) for k, v in data.get("attributes", {}).items()},
            summaries=list(data.get("summaries", [])),
            origin_references=list(data.get("origin_references", [])),
        )


@dataclass
class Relation:
    id: int
    kind: RelationKind
    from_id: int
    to_id: int
    nature: str | None = None
    date: str | None = None
    summaries: list[str] = field(default_factory=list)
    origin_references: list[str] = field(default_factory=list)

    @property
    def key(self) -> tuple[RelationKind, int, int]:
        return (self.kind, self.from_id, self.to_id)

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "kind": self.kind.value,
            "from_id": self.from_id,
            "to_id": self.to_id,
            "nature": self.nature,
            "date": self.date,
            "summaries": list(self.summaries),
            "origin_references": list(self.origin_references),
        }

    @classmethod
    def from_dict(cls, data: dict) -> Relation:
        return cls(
            id=int(data["id"]),
            kind=parse_relation_kind(data["kind"]),
            from_id=int(data["from_id"]),
            to_id=int(data["to_id"]),
            nature=data.get("nature"),
            date=data.get("date"),
            summaries=list(data.get("summaries", [])),
            origin_references=list(data.get("origin_references", [])),
        )


class KnowledgeGraph:
    """Id-indexed store of entities and relations.

    Mutation happens in place through the ``add_*``/``remove_*`` methods; the
    refinery stages copy the graph first so callers keep their input.
    """

    def __init__(self, entities: Iterable[Entity] = (), relations: Iterable[Relation] = ()):
        self.entities: dict[int, Entity] = {}
        self.relations: dict[int, Relation] = {}
        for e in entities:
            self.add_entity(e)
        for r in relations:
            self.add_relation(r)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, KnowledgeGraph):
            return NotImplemented
        return self.to_dict() == other.to_dict()

    def __repr__(self) -> str:
        return f"KnowledgeGraph({len(self.entities)} entities, {len(self.relations)} relations)"

    def copy(self) -> KnowledgeGraph:
        return copy.deepcopy(self)

    def add_entity(self, entity: Entity) -> Entity:
        if entity.id in self.entities:
            raise ValueError(f"duplicate entity id {entity.id}")
        self.entities[entity.id] = entity
        return entity

    def add_relation(self, relation: Relation) -> Relation:
        if relation.id in self.relations:
            raise ValueError(f"duplicate relation id {relation.id}")
        self.relations[relation.id] = relation
        return relation

    def remove_relation(self, relation_id: int) -> Relation:
        return self.relations.pop(relation_id)

    def remove_entity(self, entity_id: int) -> Entity:
        return self.entities.pop(entity_id)

    def next_entity_id(self) -> int:
        return max(self.entities, default=0) + 1

    def next_relation_id(self) -> int:
        return max(self.relations, default=0) + 1

    def entities_of(self, kind: EntityKind) -> list[Entity]:
        return [e for _, e in sorted(self.entities.items()) if kind in e.kinds]

    def relations_of(self, kind: RelationKind) -> list[Relation]:
        return [r for _, r in sorted(self.relations.items()) if r.kind is kind]

    def adjacency(self, kind: RelationKind) -> dict[int, list[Relation]]:
        """Outgoing relations of *kind*, grouped by source id, ordered by relation id."""
        out: dict[int, list[Relation]] = defaultdict(list)
        for rel in self.relations_of(kind):
            out[rel.from_id].append(rel)
        return out

    def incident(self, entity_id: int) -> list[Relation]:
        return [r for _, r in sorted(self.relations.items()) if entity_id in (r.from_id, r.to_id)]

    def iter_references(self) -> Iterator[str]:
        for _, e in sorted(self.entities.items()):
            yield from e.origin_references
        for _, r in sorted(self.relations.items()):
            yield from r.origin_references

    def validate(self) -> None:
        for _, entity in sorted(self.entities.items()):
            check_entity(entity)
        for _, rel in sorted(self.relations.items()):
            check_relation(rel, self)

    def to_dict(self) -> dict:
        return {
            "entities": [e.to_dict() for _, e in sorted(self.entities.items())],
            "relations": [r.to_dict() for _, r in sorted(self.relations.items())],
        }

    @classmethod
    def from_dict(cls, data: dict) -> KnowledgeGraph:
        return cls(
            (Entity.from_dict(e) for e in data.get("entities", [])),
            (Relation.from_dict(r) for r in data.get("relations", [])),
        )
