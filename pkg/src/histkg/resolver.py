"""Entity and relation resolution: duplicates out, incomplete records out.

The deterministic rules are the default. ``resolve_with_model`` sends the
entity list of one kind to the model and applies the merge groups it returns
after checking them against the same constraints the rules enforce.
"""

from __future__ import annotations

import copy
import json
import logging
from collections import defaultdict
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping

from .extractor import DEFAULT_CATALOG, ParseError, PromptCatalog, entity_prompt_record, fill, load_json_object
from .gateway import Gateway, ModelRequest
from .model import Entity, KnowledgeGraph, Relation
from .ontology import (
    LOCATION_RANK,
    UNDEFINED,
    UNSPECIFIED_ROLE,
    DanglingEndpoint,
    EntityKind,
    RelationKind,
)
from .text import name_tokens, names_related

log = logging.getLogger(__name__)

_PLACEHOLDERS = {"role": UNSPECIFIED_ROLE, "nature": UNDEFINED, "date": None}


@dataclass
class MergeMap:
    """Outcome of a merge step: winners with what they absorbed, plus old -> new ids."""

    absorbed: dict[int, list[int]] = field(default_factory=dict)
    rewrite: dict[int, int] = field(default_factory=dict)

    @classmethod
    def identity(cls, ids: Iterable[int]) -> MergeMap:
        return cls({}, {i: i for i in ids})

    def record(self, winner: int, members: Iterable[int]) -> None:
        members = sorted(set(members))
        for m in members:
            self.rewrite[m] = winner
        others = [m for m in members if m != winner]
        if others:
            self.absorbed.setdefault(winner, []).extend(others)
            self.absorbed[winner].sort()

    def update(self, other: MergeMap) -> None:
        overlap = set(self.rewrite) & set(other.rewrite)
        if overlap:
            raise ValueError(f"merge maps overlap on ids {sorted(overlap)[:5]}")
        self.rewrite.update(other.rewrite)
        for winner, ids in other.absorbed.items():
            self.absorbed.setdefault(winner, []).extend(ids)

    def then(self, later: MergeMap) -> MergeMap:
        """Compose two successive merge steps into one old -> final map."""
        out = MergeMap()
        groups: dict[int, list[int]] = defaultdict(list)
        for old, mid in self.rewrite.items():
            groups[later.rewrite.get(mid, mid)].append(old)
        for winner, members in sorted(groups.items()):
            out.record(winner, members)
        return out

    def to_dict(self) -> dict:
        return {
            "absorbed": {str(k): v for k, v in sorted(self.absorbed.items())},
            "rewrite": {str(k): v for k, v in sorted(self.rewrite.items())},
        }


def _dedup(items: Iterable[str]) -> list[str]:
    return list(dict.fromkeys(items))


def merge_records(members: list[Entity], winner_id: int, kinds: Iterable[EntityKind] | None = None) -> Entity:
    """Fold *members* into one entity carrying *winner_id*.

    The winner's attributes are kept; placeholder values (unspecified role,
    undefined nature or date) are filled from the other members in id order.
    Summaries are unioned, origin references concatenated (as a multiset).
    """
    members = sorted(members, key=lambda e: e.id)
    winner = next(e for e in members if e.id == winner_id)
    kinds = frozenset(kinds) if kinds is not None else frozenset().union(*(e.kinds for e in members))
    attributes = {}
    for kind in sorted(kinds, key=lambda k: k.value):
        donors = [e for e in members if kind in e.attributes]
        base_owner = winner if kind in winner.attributes else donors[0]
        attrs = dict(base_owner.attributes[kind])
        for name, placeholder in _PLACEHOLDERS.items():
            if name in attrs and attrs[name] in (placeholder, None):
                for donor in donors:
                    value = donor.attributes[kind].get(name)
                    if value not in (placeholder, None):
                        attrs[name] = value
                        break
        attributes[kind] = attrs
    return Entity(
        id=winner_id,
        kinds=kinds,
        attributes=attributes,
        summaries=_dedup(s for e in [winner] + [m for m in members if m is not winner] for s in e.summaries),
        origin_references=[r for e in members for r in e.origin_references],
    )


class _UnionFind:
    def __init__(self, items: Iterable[int]):
        self.parent = {i: i for i in items}

    def find(self, x: int) -> int:
        while self.parent[x] != x:
            self.parent[x] = self.parent[self.parent[x]]
            x = self.parent[x]
        return x

    def union(self, a: int, b: int) -> bool:
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return False
        self.parent[max(ra, rb)] = min(ra, rb)
        return True

    def groups(self) -> list[list[int]]:
        out: dict[int, list[int]] = defaultdict(list)
        for x in sorted(self.parent):
            out[self.find(x)].append(x)
        return [out[k] for k in sorted(out)]


def filter_incomplete(entities: Iterable[Entity]) -> tuple[list[Entity], list[int]]:
    """Drop Individuals without both name parts and other kinds without a name."""
    kept, dropped = [], []
    for e in entities:
        ok = True
        for kind in e.kinds:
            attrs = e.attributes.get(kind, {})
            if kind is EntityKind.INDIVIDUAL:
                ok &= bool(name_tokens(attrs.get("firstName") or "")) and bool(name_tokens(attrs.get("lastName") or ""))
            else:
                ok &= bool((attrs.get("name") or "").strip())
        (kept if ok else dropped).append(e if ok else e.id)
    return kept, dropped


def _informativeness(e: Entity) -> tuple[int, int, int]:
    return (len(name_tokens(e.name)), len(e.name), -e.id)


def _apply_groups(entities: list[Entity], groups: list[list[int]], pick_winner) -> tuple[list[Entity], MergeMap]:
    by_id = {e.id: e for e in entities}
    merge_map = MergeMap()
    out = []
    for group in groups:
        members = [by_id[i] for i in group]
        winner = pick_winner(members)
        merge_map.record(winner.id, group)
        out.append(members[0] if len(members) == 1 else merge_records(members, winner.id))
    out.sort(key=lambda e: e.id)
    return out, merge_map


def resolve_individuals(entities: Iterable[Entity]) -> tuple[list[Entity], MergeMap]:
    """Merge individuals whose full names are equal or token-contained.

    Containment is closed transitively (connected components), so a chain
    like "j perez" / "juan perez" / "juan perez soto" ends as one entity named
    after its most informative member.
    """
    entities = sorted(entities, key=lambda e: e.id)
    tokens = {e.id: name_tokens(e.name) for e in entities}
    uf = _UnionFind(tokens)
    for i, a in enumerate(entities):
        for b in entities[i + 1:]:
            if names_related(tokens[a.id], tokens[b.id], initials=True):
                uf.union(a.id, b.id)
    return _apply_groups(entities, uf.groups(), lambda members: max(members, key=_informativeness))


def resolve_generic_named(kind: EntityKind, entities: Iterable[Entity]) -> tuple[list[Entity], MergeMap]:
    """Organizations/Locations merge on equal names with compatible natures;
    Events on equal names and equal defined dates."""
    if kind is EntityKind.INDIVIDUAL:
        raise ValueError("use resolve_individuals for Individuals")
    entities = sorted(entities, key=lambda e: e.id)
    buckets: dict[tuple, list[int]] = defaultdict(list)
    if kind is EntityKind.EVENT:
        for e in entities:
            date = e.attributes[kind].get("date")
            # an undefined date never matches anything
            key = (e.attributes[kind]["name"], date) if date else ("#", e.id)
            buckets[key].append(e.id)
    else:
        by_name: dict[str, list[Entity]] = defaultdict(list)
        for e in entities:
            by_name[e.attributes[kind]["name"]].append(e)
        for name, group in by_name.items():
            defined = {e.nature(kind) for e in group} - {UNDEFINED}
            for e in group:
                nature = e.nature(kind)
                # one defined nature absorbs the undefined ones; two or more
                # defined natures leave the undefined ones among themselves
                bucket_nature = next(iter(defined)) if len(defined) <= 1 and defined else nature
                buckets[(name, bucket_nature)].append(e.id)
    groups = sorted(buckets.values(), key=lambda g: g[0])
    return _apply_groups(entities, groups, lambda members: min(members, key=lambda e: e.id))


def resolve_relations(relations: Iterable[Relation], rewrites: MergeMap | Mapping[int, int]) -> list[Relation]:
    """Rewrite endpoints through the merge map, then collapse equal (kind, from, to)."""
    table = rewrites.rewrite if isinstance(rewrites, MergeMap) else rewrites
    merged: dict[tuple, Relation] = {}
    for rel in sorted(relations, key=lambda r: r.id):
        for end in (rel.from_id, rel.to_id):
            if end not in table:
                raise DanglingEndpoint(end)
        rel = replace(
            rel,
            from_id=table[rel.from_id],
            to_id=table[rel.to_id],
            summaries=list(rel.summaries),
            origin_references=list(rel.origin_references),
        )
        kept = merged.get(rel.key)
        if kept is None:
            merged[rel.key] = rel
            continue
        absorb_relation(kept, rel)
    return sorted(merged.values(), key=lambda r: r.id)


def absorb_relation(kept: Relation, other: Relation) -> None:
    """Fold *other* into *kept* in place (first nature wins, earliest date wins)."""
    extra = list(other.summaries)
    if other.nature and kept.nature and other.nature != kept.nature:
        extra.append(f"nature: {other.nature}")
    elif kept.nature is None:
        kept.nature = other.nature
    kept.summaries = _dedup(kept.summaries + extra)
    kept.origin_references.extend(other.origin_references)
    dates = [d for d in (kept.date, other.date) if d]
    kept.date = min(dates) if dates else None


def filter_location_order(relations: Iterable[Relation], entities: Mapping[int, Entity]) -> list[Relation]:
    """Drop containment edges that do not go strictly from finer to coarser."""
    out = []
    for rel in relations:
        if rel.kind is RelationKind.LOCATION_IS_CONTAINED_IN_LOCATION:
            inner = entities[rel.from_id].nature(EntityKind.LOCATION)
            outer = entities[rel.to_id].nature(EntityKind.LOCATION)
            if inner in LOCATION_RANK and outer in LOCATION_RANK and LOCATION_RANK[inner] >= LOCATION_RANK[outer]:
                continue
        out.append(rel)
    return out


_CRITERIA = {
    EntityKind.INDIVIDUAL: (
        "Two individuals are the same if they have the same complete name or if the full name of one contains "
        "the other; keep the one with the more informative name."
    ),
    EntityKind.ORGANIZATION: (
        "Two organizations are the same if they have the same name and their natures are equal or one of them "
        "is undefined."
    ),
    EntityKind.LOCATION: (
        "Two locations are the same if they have the same name and their natures are equal or one of them "
        "is undefined."
    ),
    EntityKind.EVENT: "Two events are the same if they have the same name and happen on the same defined date.",
}


def _group_is_compatible(kind: EntityKind, members: list[Entity]) -> bool:
    if kind in (EntityKind.ORGANIZATION, EntityKind.LOCATION):
        return len({e.nature(kind) for e in members} - {UNDEFINED}) <= 1
    if kind is EntityKind.EVENT:
        dates = {e.attributes[kind].get("date") for e in members}
        return len(dates) == 1 and None not in dates
    return True


def resolve_with_model(
    kind: EntityKind,
    entities: Iterable[Entity],
    gateway: Gateway,
    catalog: PromptCatalog = DEFAULT_CATALOG,
) -> tuple[list[Entity], MergeMap]:
    """Model-assisted resolution; invalid groups in the answer are discarded."""
    entities = sorted(entities, key=lambda e: e.id)
    if len(entities) < 2:
        return entities, MergeMap.identity(e.id for e in entities)
    by_id = {e.id: e for e in entities}
    system = fill(catalog.template("resolve_entities"), KIND=kind.value, CRITERIA=_CRITERIA[kind])
    listing = json.dumps({kind.key: [entity_prompt_record(e, kind, e.id) for e in entities]}, ensure_ascii=False, indent=2)
    user = fill(catalog.template("resolve_user"), LIST=listing)
    raw = gateway.complete(ModelRequest(system, user, gateway.config.primary_model)).raw_text
    try:
        proposals = load_json_object(raw).get("merge", [])
    except ParseError:
        log.warning(json.dumps({"event": "resolution_unparseable", "kind": kind.value}))
        proposals = []
    used: set[int] = set()
    groups: list[list[int]] = []
    winners: dict[int, int] = {}
    for item in proposals if isinstance(proposals, list) else []:
        if not isinstance(item, dict):
            continue
        keep = item.get("keep_id")
        ids = item.get("merge_ids") or []
        if not isinstance(ids, list):
            continue
        group = sorted({keep, *ids}) if all(isinstance(i, int) and not isinstance(i, bool) for i in [keep, *ids]) else []
        if len(group) < 2 or any(i not in by_id or i in used for i in group):
            continue
        if not _group_is_compatible(kind, [by_id[i] for i in group]):
            continue
        used.update(group)
        groups.append(group)
        winners[group[0]] = keep
    groups.extend([e.id] for e in entities if e.id not in used)
    groups.sort(key=lambda g: g[0])
    return _apply_groups(
        entities, groups, lambda members: by_id[winners.get(members[0].id, members[0].id)]
    )


@dataclass
class ResolutionReport:
    dropped_incomplete: list[int] = field(default_factory=list)
    dropped_relations: int = 0
    entities_in: int = 0
    entities_out: int = 0
    relations_in: int = 0
    relations_out: int = 0
    location_order_removed: int = 0

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def resolve_graph(
    graph: KnowledgeGraph,
    mode: str = "deterministic",
    gateway: Gateway | None = None,
) -> tuple[KnowledgeGraph, MergeMap, ResolutionReport]:
    """Turn an extraction graph into the raw graph.

    Expects single-kind entities, as produced by extraction.
    """
    if mode not in ("deterministic", "model-assisted"):
        raise ValueError(f"unknown resolution mode {mode!r}")
    if mode == "model-assisted" and gateway is None:
        raise ValueError("model-assisted resolution needs a gateway")
    report = ResolutionReport(entities_in=len(graph.entities), relations_in=len(graph.relations))
    entities, report.dropped_incomplete = filter_incomplete(copy.deepcopy(list(graph.entities.values())))

    merge_map = MergeMap()
    resolved: list[Entity] = []
    for kind in EntityKind:
        of_kind = [e for e in entities if e.kinds == {kind}]
        if mode == "model-assisted":
            out, mm = resolve_with_model(kind, of_kind, gateway)
        elif kind is EntityKind.INDIVIDUAL:
            out, mm = resolve_individuals(of_kind)
        else:
            out, mm = resolve_generic_named(kind, of_kind)
        resolved.extend(out)
        merge_map.update(mm)
    # entities that are already dual-kind pass through untouched
    for e in entities:
        if len(e.kinds) > 1:
            resolved.append(e)
            merge_map.update(MergeMap.identity([e.id]))

    live = [r for r in graph.relations.values() if r.from_id in merge_map.rewrite and r.to_id in merge_map.rewrite]
    report.dropped_relations = len(graph.relations) - len(live)
    relations = resolve_relations(copy.deepcopy(live), merge_map)
    by_id = {e.id: e for e in resolved}
    ordered = filter_location_order(relations, by_id)
    report.location_order_removed = len(relations) - len(ordered)
    out = KnowledgeGraph(sorted(resolved, key=lambda e: e.id), ordered)
    report.entities_out = len(out.entities)
    report.relations_out = len(out.relations)
    return out, merge_map, report
