"""Small builders for hand-made graphs used across the test suite."""

from __future__ import annotations

from histkg.model import Entity, KnowledgeGraph, Relation
from histkg.ontology import EntityKind, RelationKind

I, E, L, O = EntityKind.INDIVIDUAL, EntityKind.EVENT, EntityKind.LOCATION, EntityKind.ORGANIZATION

IIRTO = RelationKind.INDIVIDUAL_IS_RELATED_TO_ORGANIZATION
IIRTE = RelationKind.INDIVIDUAL_IS_RELATED_TO_EVENT
OWPAL = RelationKind.ORGANIZATION_WAS_PRESENT_AT_LOCATION
OIPOO = RelationKind.ORGANIZATION_IS_PART_OF_ORGANIZATION
OIRTE = RelationKind.ORGANIZATION_IS_RELATED_TO_EVENT
EOAL = RelationKind.EVENT_OCCURS_AT_LOCATION
LICIL = RelationKind.LOCATION_IS_CONTAINED_IN_LOCATION


def _refs(id_, refs):
    return list(refs) if refs is not None else [f"doc{id_}.txt#0"]


def individual(id_, first, last, role="unspecified", refs=None):
    return Entity(id_, frozenset({I}), {I: {"firstName": first, "lastName": last, "role": role}},
                  [f"individual {first} {last}"], _refs(id_, refs))


def organization(id_, name, nature="undefined", refs=None):
    return Entity(id_, frozenset({O}), {O: {"name": name, "nature": nature}}, [f"organization {name}"], _refs(id_, refs))


def location(id_, name, nature="undefined", refs=None):
    return Entity(id_, frozenset({L}), {L: {"name": name, "nature": nature}}, [f"location {name}"], _refs(id_, refs))


def dual(id_, name, loc_nature="undefined", org_nature="undefined", refs=None):
    return Entity(id_, frozenset({L, O}), {L: {"name": name, "nature": loc_nature}, O: {"name": name, "nature": org_nature}},
                  [f"place and organization {name}"], _refs(id_, refs))


def event(id_, name, date=None, refs=None):
    return Entity(id_, frozenset({E}), {E: {"name": name, "date": date}}, [f"event {name}"], _refs(id_, refs))


def relation(id_, kind, a, b, nature=None, date=None, refs=None, summary=None):
    if kind is IIRTO and nature is None:
        nature = "other"
    return Relation(id_, kind, a, b, nature, date, [summary or f"{kind.value} {a}->{b}"],
                    list(refs) if refs is not None else [f"rel{id_}.txt#0"])


def graph(entities=(), relations=()):
    return KnowledgeGraph(entities, relations)


def reference_multiset(g: KnowledgeGraph) -> list[str]:
    return sorted(g.iter_references())


def edge_keys(g: KnowledgeGraph, kind=None) -> set[tuple[str, int, int]]:
    return {(r.kind.value, r.from_id, r.to_id) for r in g.relations.values() if kind is None or r.kind is kind}
