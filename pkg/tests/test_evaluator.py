import json
import random

import pytest

from eval_fixtures import random_graph, shaped_pair
from helpers import E, I, L, O, EOAL, dual, event, graph, individual, location, organization, relation
from histkg.evaluator import (
    REPORT_KINDS,
    Alignment,
    align_deterministic,
    align_with_model,
    kind_totals,
    render_table,
    report,
)
from histkg.gateway import Gateway, GatewayConfig, mock_backend
from histkg.ontology import EntityKind

ALIGN_SYSTEM = "two lists of JSON entities"


def sample_graph():
    return graph(
        [
            individual(1, "pedro", "rojas"),
            organization(2, "carabineros de chile", "police"),
            location(3, "talagante", "city"),
            event(4, "detencion", "1973-10-07"),
            dual(5, "tenencia isla de maipo", "building", "police"),
        ],
        [relation(1, EOAL, 4, 3)],
    )


def counts(rep):
    return {k: (c.matched, c.extra, c.missing) for k, c in rep.counts.items()}


def test_identical_graphs_align_fully():
    g = sample_graph()
    al = align_deterministic(g, g)
    assert {(i, i) for i in g.entities} <= set(al.pairs)
    rep = report(g, g, al)
    assert all(c.extra == 0 and c.missing == 0 for c in rep.counts.values())
    totals = kind_totals(g)
    assert all(rep.counts[k].matched == totals[k] for k in REPORT_KINDS)


def test_identical_five_entity_graphs_per_kind():
    g = graph([individual(i, f"n{i}x", f"s{i}y") for i in range(1, 6)])
    rep = report(g, g, align_deterministic(g, g))
    assert counts(rep)[I] == (5, 0, 0)
    assert counts(rep)[E] == (0, 0, 0)


def test_gold_fine_events_align_with_one_merged_event():
    place = location(10, "villa grimaldi", "building")
    gold = graph(
        [place, event(1, "detention", "1974-07-15"), event(2, "transport", "1974-07-15")],
        [relation(1, EOAL, 1, 10), relation(2, EOAL, 2, 10)],
    )
    auto = graph(
        [location(20, "villa grimaldi", "building"), event(5, "arrest and transfer", "1974-07-15")],
        [relation(1, EOAL, 5, 20)],
    )
    al = align_deterministic(auto, gold)
    assert (5, 1) in al.pairs and (5, 2) in al.pairs
    assert counts(report(auto, gold, al))[E] == (2, 0, 0)


def test_event_date_alone_is_not_enough():
    gold = graph([location(10, "lonquen"), event(1, "hallazgo", "1978")], [relation(1, EOAL, 1, 10)])
    auto = graph([location(20, "santiago"), event(5, "otro", "1978")], [relation(1, EOAL, 5, 20)])
    assert all(a != 5 for a, _ in align_deterministic(auto, gold).pairs)


def test_empty_auto_graph():
    gold = sample_graph()
    al = align_deterministic(graph(), gold)
    assert al.pairs == []
    rep = report(graph(), gold, al)
    totals = kind_totals(gold)
    assert all(counts(rep)[k] == (0, 0, totals[k]) for k in REPORT_KINDS)


def test_partial_individuals():
    gold = graph([individual(1, "ana", "diaz"), individual(2, "luz", "vera"), individual(3, "juan", "perez")])
    auto = graph([individual(7, "ana maria", "diaz"), individual(8, "j.", "perez"), individual(9, "otro", "nombre")])
    rep = report(auto, gold, align_deterministic(auto, gold))
    assert counts(rep)[I] == (2, 1, 1)


def test_kinds_never_cross_and_dual_counts_twice():
    auto = graph([dual(1, "londres 38", "building", "army"), individual(2, "londres", "treinta")])
    gold = graph([location(1, "londres 38"), organization(2, "londres 38"), event(3, "londres 38")])
    al = align_deterministic(auto, gold)
    assert set(al.pairs) == {(1, 1), (1, 2)}
    c = counts(report(auto, gold, al))
    assert c[L] == (1, 0, 0) and c[O] == (1, 0, 0)
    assert c[E] == (0, 0, 1) and c[I] == (0, 1, 0)


def test_grouping_does_not_inflate_matched():
    gold = graph([individual(1, "ana", "diaz")])
    auto = graph([individual(1, "ana", "diaz"), individual(2, "a.", "diaz")])
    rep = report(auto, gold, align_deterministic(auto, gold))
    assert counts(rep)[I] == (1, 0, 0)


def test_report_rejects_dangling_pairs():
    g = sample_graph()
    with pytest.raises(KeyError):
        report(g, g, Alignment([(1, 99)]))


def _gateway(fixtures):
    return Gateway(mock_backend(fixtures), GatewayConfig())


def _map_fixture(key, pairs):
    body = json.dumps({"map": [{"list_1_id": a, "list_2_id": b} for a, b in pairs]})
    return {"system_contains": ALIGN_SYSTEM, "user_contains": f'"{key}": [', "response": body}


def test_model_alignment_schema_mapping():
    auto = graph([individual(1, "a", "b")])
    gold = graph([individual(3, "c", "d")])
    al = align_with_model(auto, gold, _gateway([_map_fixture("individual", [(1, 3)])]))
    assert al.pairs == [(1, 3)] and al.method == "model-assisted" and al.discarded == 0


def test_model_alignment_discards_cross_kind_and_unknown_pairs():
    auto = graph([individual(1, "a", "b"), event(2, "x")])
    gold = graph([individual(3, "c", "d"), event(4, "y")])
    fx = [_map_fixture("individual", [(1, 3), (1, 4), (2, 3), (1, 77)]), _map_fixture("event", [])]
    al = align_with_model(auto, gold, _gateway(fx))
    assert al.pairs == [(1, 3)]
    assert al.discarded == 3


def test_model_alignment_sends_one_prompt_per_shared_kind():
    auto = graph([individual(1, "a", "b"), organization(2, "o")])
    gold = graph([individual(3, "c", "d"), location(4, "l")])
    gw = _gateway([{"system_contains": "never", "user_contains": "", "response": "{}"}])
    al = align_with_model(auto, gold, gw)
    assert al.pairs == [] and gw.stats.requests == 1


def test_model_alignment_equals_deterministic_on_fixture():
    auto, gold = shaped_pair({I: (3, 1, 1), O: (2, 2, 0), L: (2, 0, 1), E: (1, 1, 2)})
    expected = align_deterministic(auto, gold)
    by_kind = {}
    for a, g in expected.pairs:
        kind = next(iter(auto.entities[a].kinds & gold.entities[g].kinds))
        by_kind.setdefault(kind.key, []).append((a, g))
    fixtures = [_map_fixture(k.key, by_kind.get(k.key, [])) for k in REPORT_KINDS]
    al = align_with_model(auto, gold, _gateway(fixtures))
    assert al.pairs == expected.pairs
    assert counts(report(auto, gold, al)) == counts(report(auto, gold, expected))


def test_shaped_pair_yields_requested_counts():
    shape = {I: (4, 0, 2), O: (1, 3, 0), L: (0, 2, 1), E: (2, 1, 3)}
    auto, gold = shaped_pair(shape)
    assert counts(report(auto, gold, align_deterministic(auto, gold))) == shape


@pytest.mark.parametrize("seed", range(40))
def test_report_invariants_on_random_pairs(seed):
    rng = random.Random(seed)
    auto, gold = random_graph(rng, rng.randint(0, 25)), random_graph(rng, rng.randint(0, 25))
    al = align_deterministic(auto, gold)
    for a, g in al.pairs:
        assert auto.entities[a].kinds & gold.entities[g].kinds
    rep = report(auto, gold, al)
    ta, tg = kind_totals(auto), kind_totals(gold)
    for k in REPORT_KINDS:
        c = rep.counts[k]
        assert c.matched + c.missing == tg[k]
        assert 0 <= c.extra <= ta[k]
    assert rep.to_dict() == report(auto, gold, align_deterministic(auto, gold)).to_dict()
    self_rep = report(auto, auto, align_deterministic(auto, auto))
    assert all(c.extra == 0 and c.missing == 0 for c in self_rep.counts.values())


def test_render_layout():
    auto, gold = shaped_pair({I: (47, 0, 2), O: (14, 21, 2), L: (14, 6, 2), E: (18, 3, 20)})
    text = render_table(report(auto, gold, align_deterministic(auto, gold)))
    lines = text.splitlines()
    assert lines[1].split("|")[1].strip() == "Type of Entity"
    body = [ln for ln in lines if ln.startswith("|")][1:]
    assert len(body) == 12
    rows = [[c.strip() for c in ln.strip("|").split("|")] for ln in body]
    assert [r[0] for r in rows[::3]] == ["Individual", "Organization", "Location", "Event"]
    assert [r[1] for r in rows[:3]] == [
        "Present in both graphs",
        "Extra nodes not in gold standard",
        "Missing nodes from gold standard",
    ]
    assert [int(r[2]) for r in rows] == [47, 0, 2, 14, 21, 2, 14, 6, 2, 18, 3, 20]
    assert len({len(ln) for ln in lines}) == 1


def test_report_dict_shape():
    g = sample_graph()
    d = report(g, g, align_deterministic(g, g)).to_dict()
    assert list(d["counts"]) == [k.value for k in REPORT_KINDS]
    assert set(d["counts"][EntityKind.EVENT.value]) == {"matched", "extra", "missing"}
    assert d["alignment"]["method"] == "deterministic"
