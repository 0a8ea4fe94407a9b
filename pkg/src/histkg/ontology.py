"""Fixed ontology: four entity kinds, seven relation kinds, nature vocabularies.

Everything that enters a :class:`~histkg.model.KnowledgeGraph` is checked
against these tables. The ontology is closed on purpose; there is no way to
register new kinds at runtime.
"""

from __future__ import annotations

import re
from enum import Enum
from typing import TYPE_CHECKING, Iterable

if TYPE_CHECKING:
    from .model import Entity, KnowledgeGraph, Relation


class EntityKind(str, Enum):
    INDIVIDUAL = "Individual"
    EVENT = "Event"
    LOCATION = "Location"
    ORGANIZATION = "Organization"

    @property
    def key(self) -> str:
        """Top-level JSON key used by the extraction prompts (``"individual"``...)."""
        return self.value.lower()


class RelationKind(str, Enum):
    INDIVIDUAL_IS_RELATED_TO_ORGANIZATION = "IndividualIsRelatedToOrganization"
    INDIVIDUAL_IS_RELATED_TO_EVENT = "IndividualIsRelatedToEvent"
    ORGANIZATION_WAS_PRESENT_AT_LOCATION = "OrganizationWasPresentAtLocation"
    ORGANIZATION_IS_PART_OF_ORGANIZATION = "OrganizationIsPartOfOrganization"
    ORGANIZATION_IS_RELATED_TO_EVENT = "OrganizationIsRelatedToEvent"
    EVENT_OCCURS_AT_LOCATION = "EventOccursAtLocation"
    LOCATION_IS_CONTAINED_IN_LOCATION = "LocationIsContainedInLocation"

    @property
    def signature(self) -> tuple[EntityKind, EntityKind]:
        return SIGNATURES[self]

    @property
    def from_kind(self) -> EntityKind:
        return SIGNATURES[self][0]

    @property
    def to_kind(self) -> EntityKind:
        return SIGNATURES[self][1]


_I, _E, _L, _O = (
    EntityKind.INDIVIDUAL,
    EntityKind.EVENT,
    EntityKind.LOCATION,
    EntityKind.ORGANIZATION,
)
_R = RelationKind

SIGNATURES: dict[RelationKind, tuple[EntityKind, EntityKind]] = {
    _R.INDIVIDUAL_IS_RELATED_TO_ORGANIZATION: (_I, _O),
    _R.INDIVIDUAL_IS_RELATED_TO_EVENT: (_I, _E),
    _R.ORGANIZATION_WAS_PRESENT_AT_LOCATION: (_O, _L),
    _R.ORGANIZATION_IS_PART_OF_ORGANIZATION: (_O, _O),
    _R.ORGANIZATION_IS_RELATED_TO_EVENT: (_O, _E),
    _R.EVENT_OCCURS_AT_LOCATION: (_E, _L),
    _R.LOCATION_IS_CONTAINED_IN_LOCATION: (_L, _L),
}

# The only relation kinds whose subgraphs can hold directed cycles.
TRANSITIVE_KINDS = (
    _R.ORGANIZATION_IS_PART_OF_ORGANIZATION,
    _R.LOCATION_IS_CONTAINED_IN_LOCATION,
)

DUAL_KIND = frozenset({_L, _O})

UNDEFINED = "undefined"
UNSPECIFIED_ROLE = "unspecified"

# finest first; containment must go strictly up this list
LOCATION_NATURES = ("building", "street", "city", "country")
LOCATION_RANK = {nature: rank for rank, nature in enumerate(LOCATION_NATURES)}

INDIVIDUAL_ORGANIZATION_NATURES = ("affected by", "member", "chief", "other")

# Relation kinds with a closed nature vocabulary, and the value used when the
# model answers outside of it.
CLOSED_RELATION_NATURES: dict[RelationKind, tuple[tuple[str, ...], str]] = {
    _R.INDIVIDUAL_IS_RELATED_TO_ORGANIZATION: (INDIVIDUAL_ORGANIZATION_NATURES, "other"),
}

REQUIRED_ATTRIBUTES: dict[EntityKind, tuple[str, ...]] = {
    _I: ("firstName", "lastName", "role"),
    _E: ("name",),
    _L: ("name", "nature"),
    _O: ("name", "nature"),
}


class OntologyError(ValueError):
    """Base class for content that does not fit the ontology."""


class UnknownKind(OntologyError):
    pass


class MissingAttribute(OntologyError):
    def __init__(self, name: str, entity_id: int | None = None):
        self.name = name
        self.entity_id = entity_id
        where = f" on entity {entity_id}" if entity_id is not None else ""
        super().__init__(f"missing attribute {name!r}{where}")


class IllegalDualKind(OntologyError):
    pass


class DanglingEndpoint(OntologyError):
    def __init__(self, entity_id: int):
        self.entity_id = entity_id
        super().__init__(f"relation endpoint {entity_id} does not exist")


class SignatureViolation(OntologyError):
    def __init__(self, kind: RelationKind, from_kinds: Iterable[EntityKind], to_kinds: Iterable[EntityKind]):
        self.kind = kind
        self.from_kinds = frozenset(from_kinds)
        self.to_kinds = frozenset(to_kinds)
        super().__init__(
            f"{kind.value} expects {kind.from_kind.value} -> {kind.to_kind.value}, "
            f"got {sorted(k.value for k in self.from_kinds)} -> {sorted(k.value for k in self.to_kinds)}"
        )


def parse_entity_kind(value: str | EntityKind) -> EntityKind:
    if isinstance(value, EntityKind):
        return value
    for kind in EntityKind:
        if value == kind.value or value == kind.key:
            return kind
    raise UnknownKind(f"unknown entity kind {value!r}")


def parse_relation_kind(value: str | RelationKind) -> RelationKind:
    if isinstance(value, RelationKind):
        return value
    try:
        return RelationKind(value)
    except ValueError:
        raise UnknownKind(f"unknown relation kind {value!r}") from None


def check_kinds(kinds: Iterable[EntityKind]) -> frozenset[EntityKind]:
    kinds = frozenset(kinds)
    if not kinds:
        raise UnknownKind("entity has no kind")
    for kind in kinds:
        if not isinstance(kind, EntityKind):
            raise UnknownKind(f"unknown entity kind {kind!r}")
    if len(kinds) > 1 and kinds != DUAL_KIND:
        raise IllegalDualKind(
            "only Location+Organization may share a node, got "
            + "+".join(sorted(k.value for k in kinds))
        )
    return kinds


def check_entity(entity: Entity) -> None:
    """Raise an :class:`OntologyError` if *entity* does not fit the ontology."""
    kinds = check_kinds(entity.kinds)
    for kind in sorted(kinds, key=lambda k: k.value):
        attrs = entity.attributes.get(kind)
        if attrs is None:
            raise MissingAttribute(kind.value, entity.id)
        for name in REQUIRED_ATTRIBUTES[kind]:
            value = attrs.get(name)
            if not isinstance(value, str) or not value.strip():
                raise MissingAttribute(name, entity.id)
        if kind is EntityKind.LOCATION and attrs["nature"] not in LOCATION_RANK and attrs["nature"] != UNDEFINED:
            raise OntologyError(f"location nature {attrs['nature']!r} is not in the vocabulary")
    extra = set(entity.attributes) - kinds
    if extra:
        raise OntologyError(f"entity {entity.id} carries attributes for kinds it does not have: {sorted(k.value for k in extra)}")
    if not entity.summaries:
        raise MissingAttribute("summary", entity.id)
    _check_references(entity.origin_references, f"entity {entity.id}", entity.id)


_REFERENCE = re.compile(r"^.+#\d+$")


def _check_references(refs: list[str] | None, owner: str, entity_id: int | None = None) -> None:
    if not refs:
        raise MissingAttribute("origin_reference", entity_id)
    for ref in refs:
        if not isinstance(ref, str) or not _REFERENCE.match(ref):
            raise OntologyError(f"{owner}: origin reference {ref!r} is not of the form doc_id#index")


def check_relation(rel: Relation, graph: KnowledgeGraph) -> None:
    """Raise if *rel* dangles or its endpoints do not carry the signature kinds."""
    kind = parse_relation_kind(rel.kind)
    source = graph.entities.get(rel.from_id)
    if source is None:
        raise DanglingEndpoint(rel.from_id)
    target = graph.entities.get(rel.to_id)
    if target is None:
        raise DanglingEndpoint(rel.to_id)
    if kind.from_kind not in source.kinds or kind.to_kind not in target.kinds:
        raise SignatureViolation(kind, source.kinds, target.kinds)
    _check_references(rel.origin_references, f"relation {rel.id}")
    closed = CLOSED_RELATION_NATURES.get(kind)
    if closed is not None and rel.nature not in closed[0]:
        raise OntologyError(f"{kind.value} nature {rel.nature!r} is not one of {closed[0]}")


def signature_allows(kind: RelationKind, from_kinds: Iterable[EntityKind], to_kinds: Iterable[EntityKind]) -> bool:
    return kind.from_kind in set(from_kinds) and kind.to_kind in set(to_kinds)
