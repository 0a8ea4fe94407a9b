"""Graph post-processing: short-cycle removal, redundant-edge removal,
Organization/Location collision merging and event merging to a fixpoint.

Every step returns a new graph. Steps that delete information (cycle
breaking, relations that cannot survive a retype) archive the deleted
relation in :attr:`RefinementReport.discarded`, so the origin references of
the input graph are always accounted for.
"""

from __future__ import annotations

from collections import defaultdict, deque
from dataclasses import dataclass, field

from .model import Entity, KnowledgeGraph, Relation
from .ontology import (
    TRANSITIVE_KINDS,
    UNDEFINED,
    EntityKind,
    OntologyError,
    RelationKind,
    SignatureViolation,
    signature_allows,
)
from .resolver import _UnionFind, merge_records, resolve_relations

PART_OF = RelationKind.ORGANIZATION_IS_PART_OF_ORGANIZATION
CONTAINED_IN = RelationKind.LOCATION_IS_CONTAINED_IN_LOCATION
OCCURS_AT = RelationKind.EVENT_OCCURS_AT_LOCATION
PRESENT_AT = RelationKind.ORGANIZATION_WAS_PRESENT_AT_LOCATION
ORG_EVENT = RelationKind.ORGANIZATION_IS_RELATED_TO_EVENT
IND_EVENT = RelationKind.INDIVIDUAL_IS_RELATED_TO_EVENT

DEFAULT_MAX_CYCLE_LEN = 5


class CyclicInput(OntologyError):
    pass


@dataclass
class RefinementReport:
    loops_removed: int = 0
    removed_by_rule: dict[str, int] = field(default_factory=lambda: {"R1": 0, "R2": 0, "R3": 0, "R4": 0})
    collisions_merged: int = 0
    events_merged: int = 0
    iterations: int = 0
    retyped_relations_dropped: int = 0
    # (kind, cycle as node ids, removed relation id), in removal order
    loop_removals: list[tuple[str, list[int], int]] = field(default_factory=list)
    # (rule, removed relation id, implying relation id)
    redundant_removals: list[tuple[str, int, int]] = field(default_factory=list)
    discarded: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "loops_removed": self.loops_removed,
            "removed_by_rule": dict(self.removed_by_rule),
            "collisions_merged": self.collisions_merged,
            "events_merged": self.events_merged,
            "iterations": self.iterations,
            "retyped_relations_dropped": self.retyped_relations_dropped,
            "loop_removals": [list(x) for x in self.loop_removals],
            "redundant_removals": [list(x) for x in self.redundant_removals],
            "discarded": self.discarded,
        }


# -- cycles ----------------------------------------------------------------


def _successors(g: KnowledgeGraph, kind: RelationKind) -> dict[int, list[Relation]]:
    return g.adjacency(kind)


def find_short_cycles(g: KnowledgeGraph, kind: RelationKind, max_len: int = DEFAULT_MAX_CYCLE_LEN) -> list[list[int]]:
    """All simple directed cycles of *kind* with at most *max_len* edges.

    Each cycle is listed once, rotated to start at its smallest node id; the
    list is sorted by (length, node sequence).
    """
    succ = {u: sorted({r.to_id for r in rels}) for u, rels in _successors(g, kind).items()}
    cycles = []
    for start in sorted(succ):
        stack = [(start, [start])]
        while stack:
            node, path = stack.pop()
            for nxt in succ.get(node, ()):
                if nxt == start:
                    cycles.append(list(path))
                elif nxt > start and nxt not in path and len(path) < max_len:
                    stack.append((nxt, path + [nxt]))
    cycles.sort(key=lambda c: (len(c), c))
    return cycles


def cycle_relations(g: KnowledgeGraph, kind: RelationKind, cycle: list[int]) -> list[Relation]:
    succ = _successors(g, kind)
    out = []
    for i, u in enumerate(cycle):
        v = cycle[(i + 1) % len(cycle)]
        out.extend(r for r in succ.get(u, ()) if r.to_id == v)
    return out


def weakest_edge(relations: list[Relation]) -> Relation:
    """Fewest origin references, then the largest (from_id, to_id), then largest id."""
    return min(relations, key=lambda r: (len(r.origin_references), -r.from_id, -r.to_id, -r.id))


def _archive(report: RefinementReport | None, rel: Relation, reason: str) -> None:
    if report is not None:
        report.discarded.append({"reason": reason, **rel.to_dict()})


def remove_loops(
    g: KnowledgeGraph,
    max_cycle_len: int = DEFAULT_MAX_CYCLE_LEN,
    report: RefinementReport | None = None,
) -> KnowledgeGraph:
    """Break every cycle of length <= *max_cycle_len* in the transitive subgraphs."""
    g = g.copy()
    for kind in TRANSITIVE_KINDS:
        while True:
            cycles = find_short_cycles(g, kind, max_cycle_len)
            if not cycles:
                break
            cycle = cycles[0]
            victim = weakest_edge(cycle_relations(g, kind, cycle))
            g.remove_relation(victim.id)
            if report is not None:
                report.loops_removed += 1
                report.loop_removals.append((kind.value, cycle, victim.id))
            _archive(report, victim, "loop")
    return g


# -- redundant edges -------------------------------------------------------


def _path_first_hop(
    succ: dict[int, list[Relation]],
    src: int,
    dst: int,
    removed: set[int],
    skip: int | None = None,
    min_hops: int = 1,
) -> Relation | None:
    """First relation of a path src -> dst of at least *min_hops* edges, BFS order."""
    queue: deque[tuple[int, Relation, int]] = deque()
    for rel in succ.get(src, ()):
        if rel.id in removed or rel.id == skip:
            continue
        queue.append((rel.to_id, rel, 1))
    seen: set[int] = set()
    while queue:
        node, first, hops = queue.popleft()
        if node == dst and hops >= min_hops:
            return first
        if node in seen:
            continue
        seen.add(node)
        for rel in succ.get(node, ()):
            if rel.id not in removed and rel.id != skip:
                queue.append((rel.to_id, first, hops + 1))
    return None


def _reaches(succ: dict[int, list[Relation]], src: int, dst: int, removed: set[int]) -> bool:
    return _path_first_hop(succ, src, dst, removed) is not None


def _fold_into(keeper: Relation, gone: Relation) -> None:
    keeper.summaries = list(dict.fromkeys(keeper.summaries + gone.summaries))
    keeper.origin_references.extend(gone.origin_references)


def remove_redundant_edges(g: KnowledgeGraph, report: RefinementReport | None = None) -> KnowledgeGraph:
    """Remove relations implied through the transitive IsPartOf / IsContainedIn kinds.

    R1  O1 IsPartOf O3, with an IsPartOf path O1 ~> O3 of two or more steps
    R2  E OccursAt L2, with E OccursAt L1 and L1 ~> L2
    R3  O WasPresentAt L2, with O WasPresentAt L1 on the same defined date and L1 ~> L2
    R4  O2 IsRelatedTo E, with O1 IsRelatedTo E and O1 ~> O2

    Removal is sequential against the current graph, so reachability is
    always preserved; on acyclic inputs the result does not depend on order.
    The removed relation's summaries and references go to the implying edge.
    """
    for kind in TRANSITIVE_KINDS:
        cycles = find_short_cycles(g, kind)
        if cycles:
            raise CyclicInput(f"{kind.value} still has a cycle through {cycles[0]}")
    g = g.copy()
    removed: set[int] = set()

    def drop(rule: str, rel: Relation, keeper: Relation) -> None:
        _fold_into(keeper, rel)
        removed.add(rel.id)
        if report is not None:
            report.removed_by_rule[rule] += 1
            report.redundant_removals.append((rule, rel.id, keeper.id))

    part_of = g.adjacency(PART_OF)
    contained = g.adjacency(CONTAINED_IN)

    for rel in sorted(g.relations_of(PART_OF), key=lambda r: (r.from_id, r.to_id, r.id)):
        keeper = _path_first_hop(part_of, rel.from_id, rel.to_id, removed, skip=rel.id, min_hops=2)
        if keeper is not None:
            drop("R1", rel, keeper)

    def by_shared_source(rule: str, kind: RelationKind, same_date: bool) -> None:
        for src, rels in sorted(g.adjacency(kind).items()):
            for rel in sorted(rels, key=lambda r: (r.to_id, r.id)):
                if same_date and not rel.date:
                    continue
                for other in rels:
                    if other.id == rel.id or other.id in removed or other.to_id == rel.to_id:
                        continue
                    if same_date and other.date != rel.date:
                        continue
                    if _reaches(contained, other.to_id, rel.to_id, removed):
                        drop(rule, rel, other)
                        break

    by_shared_source("R2", OCCURS_AT, same_date=False)
    by_shared_source("R3", PRESENT_AT, same_date=True)

    into_event: dict[int, list[Relation]] = defaultdict(list)
    for rel in g.relations_of(ORG_EVENT):
        into_event[rel.to_id].append(rel)
    for event_id, rels in sorted(into_event.items()):
        for rel in sorted(rels, key=lambda r: (r.from_id, r.id)):
            for other in rels:
                if other.id == rel.id or other.id in removed or other.from_id == rel.from_id:
                    continue
                if _reaches(part_of, other.from_id, rel.from_id, removed):
                    drop("R4", rel, other)
                    break

    for rid in removed:
        g.remove_relation(rid)
    return g


# -- node merging ----------------------------------------------------------


def _single(e: Entity, kind: EntityKind) -> bool:
    return e.kinds == {kind}


def merge_location_organization_collisions(g: KnowledgeGraph, report: RefinementReport | None = None) -> KnowledgeGraph:
    """Resolve Organization/Location nodes that share a name.

    If only one of the two has a defined nature its kind wins; otherwise the
    merged node is both a Location and an Organization. Pairs are taken in id
    order and the step repeats until no single-kind pair shares a name.
    """
    g = g.copy()
    while True:
        orgs: dict[str, list[Entity]] = defaultdict(list)
        locs: dict[str, list[Entity]] = defaultdict(list)
        for e in g.entities_of(EntityKind.ORGANIZATION):
            if _single(e, EntityKind.ORGANIZATION):
                orgs[e.name].append(e)
        for e in g.entities_of(EntityKind.LOCATION):
            if _single(e, EntityKind.LOCATION):
                locs[e.name].append(e)
        names = sorted(set(orgs) & set(locs))
        if not names:
            return g
        org, loc = orgs[names[0]][0], locs[names[0]][0]
        org_defined = org.nature(EntityKind.ORGANIZATION) != UNDEFINED
        loc_defined = loc.nature(EntityKind.LOCATION) != UNDEFINED
        if org_defined and not loc_defined:
            kinds = {EntityKind.ORGANIZATION}
        elif loc_defined and not org_defined:
            kinds = {EntityKind.LOCATION}
        else:
            kinds = {EntityKind.ORGANIZATION, EntityKind.LOCATION}
        winner = min(org.id, loc.id)
        merged = merge_records([org, loc], winner, kinds)
        g.remove_entity(org.id)
        g.remove_entity(loc.id)
        g.add_entity(merged)
        loser = max(org.id, loc.id)
        if report is not None:
            report.collisions_merged += 1
        g = _rewire_after_merge(g, {loser: winner}, report, "retype")


def _rewire_after_merge(
    g: KnowledgeGraph,
    rewrite: dict[int, int],
    report: RefinementReport | None,
    reason: str,
) -> KnowledgeGraph:
    """Point relations of absorbed ids at their winner, drop what no longer fits, dedup."""
    table = {i: i for i in g.entities}
    table.update(rewrite)
    kept, dropped = [], 0
    for rel in sorted(g.relations.values(), key=lambda r: r.id):
        src, dst = table[rel.from_id], table[rel.to_id]
        if signature_allows(rel.kind, g.entities[src].kinds, g.entities[dst].kinds):
            kept.append(rel)
        else:
            dropped += 1
            _archive(report, rel, reason)
    if report is not None:
        report.retyped_relations_dropped += dropped
    out = KnowledgeGraph(g.entities.values(), resolve_relations(kept, table))
    for rel in out.relations.values():
        if not signature_allows(rel.kind, out.entities[rel.from_id].kinds, out.entities[rel.to_id].kinds):
            raise SignatureViolation(rel.kind, out.entities[rel.from_id].kinds, out.entities[rel.to_id].kinds)
    return out


def _event_groups(g: KnowledgeGraph, kind: RelationKind, event_side: str) -> list[list[int]]:
    """Events sharing (anchor entity, defined date) through relations of *kind*."""
    events = {e.id: e for e in g.entities_of(EntityKind.EVENT)}
    uf = _UnionFind(events)
    first: dict[tuple[int, str], int] = {}
    for rel in g.relations_of(kind):
        event_id, anchor = (rel.from_id, rel.to_id) if event_side == "from" else (rel.to_id, rel.from_id)
        date = events[event_id].date
        if not date:
            continue
        key = (anchor, date)
        if key in first:
            uf.union(first[key], event_id)
        else:
            first[key] = event_id
    return [grp for grp in uf.groups() if len(grp) > 1]


def _merge_event_groups(g: KnowledgeGraph, groups: list[list[int]], report: RefinementReport | None) -> KnowledgeGraph:
    g = g.copy()
    rewrite: dict[int, int] = {}
    for group in groups:
        members = [g.entities[i] for i in group]
        winner = group[0]
        merged = merge_records(members, winner, {EntityKind.EVENT})
        extra = [f"also recorded as: {m.name}" for m in members[1:] if m.name != merged.name]
        merged.summaries = list(dict.fromkeys(merged.summaries + extra))
        for m in members:
            g.remove_entity(m.id)
            rewrite[m.id] = winner
        g.add_entity(merged)
        if report is not None:
            report.events_merged += len(group) - 1
    return _rewire_after_merge(g, rewrite, report, "event-merge")


def merge_events_fixpoint(g: KnowledgeGraph, report: RefinementReport | None = None) -> KnowledgeGraph:
    """Alternate "one event per location per date" and "one event per
    individual per date" until a full round changes nothing."""
    g = g.copy()
    iterations = 0
    while True:
        iterations += 1
        changed = False
        groups = _event_groups(g, OCCURS_AT, "from")
        if groups:
            g = _merge_event_groups(g, groups, report)
            changed = True
        groups = _event_groups(g, IND_EVENT, "to")
        if groups:
            g = _merge_event_groups(g, groups, report)
            changed = True
        if not changed:
            break
    if report is not None:
        report.iterations += iterations
    return g


def dedup_relations(g: KnowledgeGraph) -> KnowledgeGraph:
    return KnowledgeGraph(g.entities.values(), resolve_relations(g.relations.values(), {i: i for i in g.entities}))


def refine(
    g: KnowledgeGraph,
    max_cycle_len: int = DEFAULT_MAX_CYCLE_LEN,
    report: RefinementReport | None = None,
) -> KnowledgeGraph:
    """Full post-processing: edges first, then nodes.

    Event merging can make an OccursAt or IsRelatedTo edge implied again (a
    merged event may sit at both a street and its city), so redundant edges
    are removed once more at the end; that keeps ``refine`` idempotent.
    """
    g = dedup_relations(g.copy())
    g = remove_loops(g, max_cycle_len, report)
    g = remove_redundant_edges(g, report)
    g = merge_location_organization_collisions(g, report)
    g = merge_events_fixpoint(g, report)
    g = remove_redundant_edges(g, report)
    return g
