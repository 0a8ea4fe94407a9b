"""Compare an automatic graph with a gold-standard graph, entity by entity.

Alignment pairs may group several nodes on either side. The report counts
covered *gold nodes* (not pairs) as matched, so grouping cannot inflate it.
"""

from __future__ import annotations

import json
import logging
from collections import Counter
from dataclasses import dataclass, field

from .extractor import DEFAULT_CATALOG, ParseError, PromptCatalog, entity_prompt_record, fill, load_json_object
from .gateway import Gateway, ModelRequest
from .model import Entity, KnowledgeGraph
from .ontology import EntityKind, RelationKind
from .text import name_tokens, names_related

log = logging.getLogger(__name__)

REPORT_KINDS = (EntityKind.INDIVIDUAL, EntityKind.ORGANIZATION, EntityKind.LOCATION, EntityKind.EVENT)
ROW_LABELS = (
    ("matched", "Present in both graphs"),
    ("extra", "Extra nodes not in gold standard"),
    ("missing", "Missing nodes from gold standard"),
)


@dataclass
class Alignment:
    pairs: list[tuple[int, int]] = field(default_factory=list)
    method: str = "deterministic"
    discarded: int = 0

    def to_dict(self) -> dict:
        return {"method": self.method, "pairs": [list(p) for p in self.pairs], "discarded": self.discarded}


@dataclass
class KindCounts:
    matched: int = 0
    extra: int = 0
    missing: int = 0


@dataclass
class ComparisonReport:
    counts: dict[EntityKind, KindCounts]
    alignment: Alignment

    def to_dict(self) -> dict:
        return {
            "counts": {k.value: dict(vars(self.counts[k])) for k in REPORT_KINDS},
            "alignment": self.alignment.to_dict(),
        }

    def render(self) -> str:
        return render_table(self)


def _compatible(a: Entity, b: Entity) -> bool:
    return bool(a.kinds & b.kinds)


def _locations_of(g: KnowledgeGraph) -> dict[int, set[int]]:
    out: dict[int, set[int]] = {}
    for rel in g.relations_of(RelationKind.EVENT_OCCURS_AT_LOCATION):
        out.setdefault(rel.from_id, set()).add(rel.to_id)
    return out


def align_deterministic(auto: KnowledgeGraph, gold: KnowledgeGraph) -> Alignment:
    """Rule-based alignment.

    Individuals: full names equal or token-contained (initials allowed).
    Organizations/Locations: names equal or token-contained.
    Events: same defined date at aligned locations, or names token-contained.
    """
    pairs: set[tuple[int, int]] = set()
    tokens_a = {e.id: name_tokens(e.name) for e in auto.entities.values()}
    tokens_g = {e.id: name_tokens(e.name) for e in gold.entities.values()}

    for kind in (EntityKind.INDIVIDUAL, EntityKind.ORGANIZATION, EntityKind.LOCATION):
        initials = kind is EntityKind.INDIVIDUAL
        for a in auto.entities_of(kind):
            for g in gold.entities_of(kind):
                if names_related(tokens_a[a.id], tokens_g[g.id], initials=initials):
                    pairs.add((a.id, g.id))

    located = {(a, g) for a, g in pairs if EntityKind.LOCATION in auto.entities[a].kinds
               and EntityKind.LOCATION in gold.entities[g].kinds}
    auto_locs, gold_locs = _locations_of(auto), _locations_of(gold)
    for a in auto.entities_of(EntityKind.EVENT):
        for g in gold.entities_of(EntityKind.EVENT):
            same_place = a.date is not None and a.date == g.date and any(
                (la, lg) in located for la in auto_locs.get(a.id, ()) for lg in gold_locs.get(g.id, ())
            )
            if same_place or names_related(tokens_a[a.id], tokens_g[g.id]):
                pairs.add((a.id, g.id))
    return Alignment(sorted(pairs), "deterministic")


def _validated(auto: KnowledgeGraph, gold: KnowledgeGraph, candidates, method: str) -> Alignment:
    pairs: set[tuple[int, int]] = set()
    discarded = 0
    for a, g in candidates:
        ea, eg = auto.entities.get(a), gold.entities.get(g)
        if ea is None or eg is None or not _compatible(ea, eg):
            discarded += 1
            continue
        pairs.add((a, g))
    return Alignment(sorted(pairs), method, discarded)


def align_with_model(
    auto: KnowledgeGraph,
    gold: KnowledgeGraph,
    gateway: Gateway,
    catalog: PromptCatalog = DEFAULT_CATALOG,
) -> Alignment:
    """One alignment prompt per entity kind; pairs breaking the kind rule are dropped."""
    system = catalog.template("align_entities")
    candidates: list[tuple[int, int]] = []
    for kind in REPORT_KINDS:
        list1 = [entity_prompt_record(e, kind, e.id) for e in auto.entities_of(kind)]
        list2 = [entity_prompt_record(e, kind, e.id) for e in gold.entities_of(kind)]
        if not list1 or not list2:
            continue
        user = fill(
            catalog.template("align_user"),
            LIST_1=json.dumps({kind.key: list1}, ensure_ascii=False, indent=2),
            LIST_2=json.dumps({kind.key: list2}, ensure_ascii=False, indent=2),
        )
        raw = gateway.complete(ModelRequest(system, user, gateway.config.primary_model)).raw_text
        items = load_json_object(raw).get("map", [])
        if not isinstance(items, list):
            raise ParseError("alignment 'map' is not a list")
        for item in items:
            if not isinstance(item, dict):
                continue
            a, g = item.get("list_1_id"), item.get("list_2_id")
            if isinstance(a, int) and isinstance(g, int) and not isinstance(a, bool) and not isinstance(g, bool):
                candidates.append((a, g))
    alignment = _validated(auto, gold, candidates, "model-assisted")
    if alignment.discarded:
        log.info(json.dumps({"event": "alignment_pairs_discarded", "count": alignment.discarded}))
    return alignment


def report(auto: KnowledgeGraph, gold: KnowledgeGraph, alignment: Alignment) -> ComparisonReport:
    """Per-kind matched/extra/missing counts.

    A dual Location+Organization node is counted under both of its kinds.
    """
    for a, g in alignment.pairs:
        if a not in auto.entities or g not in gold.entities:
            raise KeyError(f"alignment pair ({a}, {g}) references a missing entity")
    auto_hit = {a for a, _ in alignment.pairs}
    gold_hit = {g for _, g in alignment.pairs}
    counts = {}
    for kind in REPORT_KINDS:
        gold_ids = [e.id for e in gold.entities_of(kind)]
        auto_ids = [e.id for e in auto.entities_of(kind)]
        matched = sum(1 for i in gold_ids if i in gold_hit)
        counts[kind] = KindCounts(
            matched=matched,
            extra=sum(1 for i in auto_ids if i not in auto_hit),
            missing=len(gold_ids) - matched,
        )
    return ComparisonReport(counts, alignment)


def render_table(rep: ComparisonReport) -> str:
    """Text table, three rows per entity kind."""
    head = "Type of Entity"
    w1 = max(len(head), *(len(k.value) for k in REPORT_KINDS))
    w2 = max(len(label) for _, label in ROW_LABELS)
    w3 = max(5, *(len(str(getattr(rep.counts[k], f))) for k in REPORT_KINDS for f, _ in ROW_LABELS))
    rule = f"+{'-' * (w1 + 2)}+{'-' * (w2 + 2)}+{'-' * (w3 + 2)}+"
    lines = [rule, f"| {head:<{w1}} | {'':<{w2}} | {'Count':>{w3}} |", rule]
    for kind in REPORT_KINDS:
        for i, (attr, label) in enumerate(ROW_LABELS):
            name = kind.value if i == 0 else ""
            lines.append(f"| {name:<{w1}} | {label:<{w2}} | {getattr(rep.counts[kind], attr):>{w3}} |")
        lines.append(rule)
    return "\n".join(lines) + "\n"


def kind_totals(g: KnowledgeGraph) -> Counter:
    return Counter({k: len(g.entities_of(k)) for k in REPORT_KINDS})
