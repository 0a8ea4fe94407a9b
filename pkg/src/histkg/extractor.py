"""Prompt assembly and tolerant parsing of model output into entities/relations.

Prompts live as plain-text files under ``histkg/prompts`` so they can be
diffed and swapped without touching code. Parsing never raises for a bad
element: invalid records are dropped and counted, and only a response that
is not JSON at all (or answers under the wrong key) raises.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import re
from collections import Counter
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Iterator, Mapping

from .chunker import Fragment
from .gateway import Gateway, GatewayError, ModelRequest
from .model import Entity, Relation
from .ontology import (
    CLOSED_RELATION_NATURES,
    LOCATION_RANK,
    UNDEFINED,
    UNSPECIFIED_ROLE,
    EntityKind,
    RelationKind,
    signature_allows,
)
from .text import normalize_date, normalize_text

# JSON field names carrying the endpoint ids in each relation prompt
RELATION_FIELDS: dict[RelationKind, tuple[str, str]] = {
    RelationKind.INDIVIDUAL_IS_RELATED_TO_ORGANIZATION: ("individualId", "organizationId"),
    RelationKind.INDIVIDUAL_IS_RELATED_TO_EVENT: ("individualId", "eventId"),
    RelationKind.ORGANIZATION_WAS_PRESENT_AT_LOCATION: ("organizationId", "locationId"),
    RelationKind.ORGANIZATION_IS_PART_OF_ORGANIZATION: ("organizationId", "parentOrganizationId"),
    RelationKind.ORGANIZATION_IS_RELATED_TO_EVENT: ("organizationId", "eventId"),
    RelationKind.EVENT_OCCURS_AT_LOCATION: ("eventId", "locationId"),
    RelationKind.LOCATION_IS_CONTAINED_IN_LOCATION: ("locationId", "containerLocationId"),
}

GATE_SENTENCE = "individual person with first and last name"


class ParseError(ValueError):
    pass


class Unparseable(ParseError):
    def __init__(self, raw: str):
        self.raw = raw
        super().__init__(f"model output is not a JSON object ({len(raw)} chars)")


class WrongTopLevelKey(ParseError):
    def __init__(self, expected: str, found: list[str]):
        self.expected = expected
        self.found = found
        super().__init__(f"expected top-level key {expected!r}, found {found}")


class SignatureMismatch(ValueError):
    pass


class ExtractionError(RuntimeError):
    def __init__(self, origin_reference: str, cause: BaseException):
        self.origin_reference = origin_reference
        super().__init__(f"extraction failed for {origin_reference}: {cause}")


class PromptCatalog:
    """Loads prompt templates from a directory (the packaged one by default)."""

    def __init__(self, directory: str | Path | None = None):
        self.directory = Path(directory) if directory else None

    def _read(self, name: str) -> str:
        if self.directory is not None:
            return (self.directory / name).read_text(encoding="utf-8").rstrip("\n")
        return _packaged(name)

    def entity(self, kind: EntityKind) -> str:
        return self._read(f"entity_{kind.key}.txt")

    def relation(self, kind: RelationKind) -> str:
        return self._read(f"relation_{kind.value}.txt")

    def template(self, name: str) -> str:
        return self._read(f"{name}.txt")

    def digest(self) -> str:
        h = hashlib.sha256()
        names = [f"entity_{k.key}.txt" for k in EntityKind] + [f"relation_{k.value}.txt" for k in RelationKind]
        for name in names + ["entity_user.txt", "relation_user.txt"]:
            h.update(name.encode())
            h.update(self._read(name).encode("utf-8"))
        return h.hexdigest()


@lru_cache(maxsize=None)
def _packaged(name: str) -> str:
    return resources.files("histkg").joinpath("prompts", name).read_text(encoding="utf-8").rstrip("\n")


DEFAULT_CATALOG = PromptCatalog()


_PLACEHOLDER = re.compile(r"\{\{([A-Z_0-9]+)\}\}")


def fill(template: str, **values: str) -> str:
    # single pass, so substituted text is never scanned for markers again
    return _PLACEHOLDER.sub(lambda m: values.get(m.group(1), m.group(0)), template)


def build_entity_prompt(kind: EntityKind, catalog: PromptCatalog = DEFAULT_CATALOG) -> str:
    return catalog.entity(kind)


def entity_user_content(fragment: Fragment, catalog: PromptCatalog = DEFAULT_CATALOG) -> str:
    return fill(catalog.template("entity_user"), ORIGIN_REFERENCE=fragment.origin_reference, DOCUMENT=fragment.text)


def local_id_map(from_entities: list[Entity], to_entities: list[Entity]) -> dict[int, int]:
    """Number the prompt's entities 1..n in list order; returns local -> graph id."""
    mapping: dict[int, int] = {}
    seen: dict[int, int] = {}
    for entity in itertools.chain(from_entities, to_entities):
        if entity.id not in seen:
            seen[entity.id] = len(seen) + 1
            mapping[seen[entity.id]] = entity.id
    return mapping


def entity_prompt_record(entity: Entity, kind: EntityKind, local_id: int) -> dict:
    attrs = entity.attributes.get(kind, {})
    record: dict = {"id": local_id}
    if kind is EntityKind.INDIVIDUAL:
        record.update(firstName=attrs.get("firstName"), lastName=attrs.get("lastName"), role=attrs.get("role"))
    elif kind is EntityKind.EVENT:
        record.update(name=attrs.get("name"), date=attrs.get("date") or UNDEFINED)
    else:
        record.update(name=attrs.get("name"), nature=attrs.get("nature") or UNDEFINED)
    if entity.summaries:
        record["summary"] = entity.summaries[0]
    return record


def build_relation_prompt(
    kind: RelationKind,
    from_entities: list[Entity],
    to_entities: list[Entity],
    fragment: Fragment,
    model_id: str = "gpt-4o-mini",
    catalog: PromptCatalog = DEFAULT_CATALOG,
) -> ModelRequest:
    """Assemble the request for one relation kind over one fragment.

    Entity ids in the lists are prompt-local (see :func:`local_id_map`).
    """
    for side, entities, want in (("from", from_entities, kind.from_kind), ("to", to_entities, kind.to_kind)):
        for entity in entities:
            if want not in entity.kinds:
                raise SignatureMismatch(f"{kind.value}: {side} entity {entity.id} is not a {want.value}")
    to_local = {g: l for l, g in local_id_map(from_entities, to_entities).items()}
    list1 = [entity_prompt_record(e, kind.from_kind, to_local[e.id]) for e in from_entities]
    list2 = [entity_prompt_record(e, kind.to_kind, to_local[e.id]) for e in to_entities]
    user = fill(
        catalog.template("relation_user"),
        LIST_1=json.dumps({kind.from_kind.key: list1}, ensure_ascii=False, indent=2),
        LIST_2=json.dumps({kind.to_kind.key: list2}, ensure_ascii=False, indent=2),
        ORIGIN_REFERENCE=fragment.origin_reference,
        DOCUMENT=fragment.text,
    )
    return ModelRequest(catalog.relation(kind), user, model_id)


_FENCE = re.compile(r"^\s*```[a-zA-Z]*\s*\n?(.*?)\n?\s*```\s*$", re.DOTALL)


def load_json_object(raw: str) -> dict:
    """Parse model output into a dict, tolerating code fences and stray prose."""
    if not isinstance(raw, str):
        raise Unparseable(repr(raw))
    text = raw.strip()
    m = _FENCE.match(text)
    if m:
        text = m.group(1).strip()
    try:
        data = json.loads(text)
    except ValueError:
        start, end = text.find("{"), text.rfind("}")
        if start == -1 or end <= start:
            raise Unparseable(raw) from None
        try:
            data = json.loads(text[start:end + 1])
        except ValueError:
            raise Unparseable(raw) from None
    if not isinstance(data, dict):
        raise WrongTopLevelKey("<object>", [type(data).__name__])
    return data


def _top_level_list(data: dict, key: str) -> list:
    if key in data:
        value = data[key]
    else:
        folded = {k.lower(): k for k in data if isinstance(k, str)}
        if key.lower() not in folded:
            raise WrongTopLevelKey(key, sorted(map(str, data)))
        value = data[folded[key.lower()]]
    if isinstance(value, dict):
        return [value]
    if not isinstance(value, list):
        raise WrongTopLevelKey(key, sorted(map(str, data)))
    return value


def _text(value: object) -> str:
    return normalize_text(value) if isinstance(value, str) else ""


def _summaries(value: object) -> list[str]:
    if isinstance(value, str):
        value = [value]
    if not isinstance(value, list):
        return []
    return [s.strip() for s in value if isinstance(s, str) and s.strip()]


def _references(fragment: Fragment) -> list[str]:
    # the model only ever sees this fragment's reference, so anything else it
    # writes back cannot resolve to a real fragment
    return [fragment.origin_reference]


def _entity_attributes(kind: EntityKind, item: dict, stats: Counter) -> dict[str, str | None] | None:
    if kind is EntityKind.INDIVIDUAL:
        first, last = _text(item.get("firstName")), _text(item.get("lastName"))
        if not first or not last:
            return None
        role = _text(item.get("role")) or UNSPECIFIED_ROLE
        return {"firstName": first, "lastName": last, "role": role}
    name = _text(item.get("name"))
    if not name:
        return None
    if kind is EntityKind.EVENT:
        return {"name": name, "date": normalize_date(item.get("date"))}
    nature = _text(item.get("nature")) or UNDEFINED
    if kind is EntityKind.LOCATION and nature not in LOCATION_RANK and nature != UNDEFINED:
        stats["coerced"] += 1
        nature = UNDEFINED
    return {"name": name, "nature": nature}


def parse_entity_response(
    kind: EntityKind,
    raw: str,
    fragment: Fragment,
    ids: Iterator[int] | None = None,
    stats: Counter | None = None,
) -> list[Entity]:
    ids = ids if ids is not None else itertools.count(1)
    stats = stats if stats is not None else Counter()
    items = _top_level_list(load_json_object(raw), kind.key)
    out = []
    for item in items:
        attrs = _entity_attributes(kind, item, stats) if isinstance(item, dict) else None
        summaries = _summaries(item.get("summary")) if attrs is not None else []
        if attrs is None or not summaries:
            stats["dropped"] += 1
            continue
        out.append(Entity(next(ids), frozenset({kind}), {kind: attrs}, summaries, _references(fragment)))
        stats["parsed"] += 1
    return out


def coerce_relation_nature(kind: RelationKind, value: object) -> tuple[str | None, bool]:
    """Return ``(nature, coerced)``; closed vocabularies map unknown values to their default."""
    nature = _text(value).replace("_", " ").replace("-", " ") or None
    closed = CLOSED_RELATION_NATURES.get(kind)
    if closed is None:
        return nature, False
    vocabulary, default = closed
    if nature in vocabulary:
        return nature, False
    return default, True


def _as_id(value: object) -> int | None:
    if isinstance(value, bool):
        return None
    if isinstance(value, int):
        return value
    if isinstance(value, float) and value.is_integer():
        return int(value)
    if isinstance(value, str) and value.strip().isdigit():
        return int(value.strip())
    return None


def parse_relation_response(
    kind: RelationKind,
    raw: str,
    id_map: Mapping[int, int],
    fragment: Fragment,
    ids: Iterator[int] | None = None,
    stats: Counter | None = None,
    kinds: Mapping[int, frozenset[EntityKind]] | None = None,
) -> list[Relation]:
    """Parse relations, remapping prompt-local ids through *id_map*.

    When *kinds* (graph id -> kind set) is given, relations whose endpoints do
    not satisfy the signature are dropped as well.
    """
    ids = ids if ids is not None else itertools.count(1)
    stats = stats if stats is not None else Counter()
    from_field, to_field = RELATION_FIELDS[kind]
    items = _top_level_list(load_json_object(raw), kind.value)
    out = []
    for item in items:
        if not isinstance(item, dict):
            stats["dropped"] += 1
            continue
        src, dst = _as_id(item.get(from_field)), _as_id(item.get(to_field))
        if src not in id_map or dst not in id_map:
            stats["dropped"] += 1
            continue
        from_id, to_id = id_map[src], id_map[dst]
        if kinds is not None and not signature_allows(kind, kinds.get(from_id, ()), kinds.get(to_id, ())):
            stats["dropped"] += 1
            continue
        nature, coerced = coerce_relation_nature(kind, item.get("nature"))
        if coerced:
            stats["coerced"] += 1
        out.append(
            Relation(
                id=next(ids),
                kind=kind,
                from_id=from_id,
                to_id=to_id,
                nature=nature,
                date=normalize_date(item.get("date")),
                summaries=_summaries(item.get("summary")),
                origin_references=_references(fragment),
            )
        )
        stats["parsed"] += 1
    return out


@dataclass
class FragmentExtraction:
    """Entities and relations of one fragment, ids local to the fragment."""

    origin_reference: str
    entities: list[Entity] = field(default_factory=list)
    relations: list[Relation] = field(default_factory=list)
    stats: dict[str, dict[str, int]] = field(default_factory=dict)
    calls_skipped: int = 0

    def to_dict(self) -> dict:
        return {
            "origin_reference": self.origin_reference,
            "entities": [e.to_dict() for e in self.entities],
            "relations": [r.to_dict() for r in self.relations],
            "stats": self.stats,
            "calls_skipped": self.calls_skipped,
        }

    @classmethod
    def from_dict(cls, data: dict) -> FragmentExtraction:
        return cls(
            data["origin_reference"],
            [Entity.from_dict(e) for e in data["entities"]],
            [Relation.from_dict(r) for r in data["relations"]],
            data.get("stats", {}),
            data.get("calls_skipped", 0),
        )


def extract_fragment(fragment: Fragment, gateway: Gateway, catalog: PromptCatalog = DEFAULT_CATALOG) -> FragmentExtraction:
    """Run the four entity prompts, then the seven relation prompts, on one fragment."""
    result = FragmentExtraction(fragment.origin_reference)
    entity_ids = itertools.count(1)
    relation_ids = itertools.count(1)
    user = entity_user_content(fragment, catalog)

    def ask(req: ModelRequest) -> str:
        try:
            return gateway.complete(req).raw_text
        except GatewayError as exc:
            raise ExtractionError(fragment.origin_reference, exc) from exc

    for kind in EntityKind:
        stats: Counter = Counter()
        raw = ask(ModelRequest(build_entity_prompt(kind, catalog), user, gateway.config.primary_model))
        try:
            result.entities.extend(parse_entity_response(kind, raw, fragment, entity_ids, stats))
        except ParseError:
            stats["unparseable"] += 1
        result.stats[kind.value] = dict(stats)

    kinds = {e.id: e.kinds for e in result.entities}
    for kind in RelationKind:
        stats = Counter()
        sources = [e for e in result.entities if kind.from_kind in e.kinds]
        targets = [e for e in result.entities if kind.to_kind in e.kinds]
        if not sources or not targets:
            result.calls_skipped += 1
            continue
        req = build_relation_prompt(kind, sources, targets, fragment, gateway.config.primary_model, catalog)
        raw = ask(req)
        try:
            result.relations.extend(
                parse_relation_response(kind, raw, local_id_map(sources, targets), fragment, relation_ids, stats, kinds)
            )
        except ParseError:
            stats["unparseable"] += 1
        result.stats[kind.value] = dict(stats)
    return result
