import json
from collections import Counter

import pytest
from hypothesis import given, settings, strategies as st

from helpers import E, I, L, O, dual, event, individual, location, organization
from histkg.chunker import split_document
from histkg.extractor import (
    DEFAULT_CATALOG,
    GATE_SENTENCE,
    RELATION_FIELDS,
    ExtractionError,
    FragmentExtraction,
    ParseError,
    SignatureMismatch,
    Unparseable,
    WrongTopLevelKey,
    build_entity_prompt,
    build_relation_prompt,
    coerce_relation_nature,
    entity_user_content,
    extract_fragment,
    fill,
    load_json_object,
    local_id_map,
    parse_entity_response,
    parse_relation_response,
)
from histkg.gateway import Gateway, GatewayConfig, mock_backend
from histkg.ontology import CLOSED_RELATION_NATURES, INDIVIDUAL_ORGANIZATION_NATURES, EntityKind, RelationKind

DOC = "El 7 de octubre de 1973 fue detenido Pedro Rojas en Isla de Maipo."
FRAG = split_document("d1.txt", DOC)[0]

ENTITY_FIELDS = {
    EntityKind.INDIVIDUAL: ["firstName", "lastName", "role", "summary", "origin_reference"],
    EntityKind.EVENT: ["name", "date", "summary", "origin_reference"],
    EntityKind.LOCATION: ["name", "nature", "summary", "origin_reference"],
    EntityKind.ORGANIZATION: ["name", "nature", "summary", "origin_reference"],
}


def _schema_keys(template: str) -> list[str]:
    start = template.index("{")
    return [line.split('"')[1] for line in template[start:].splitlines() if line.strip().startswith('"')]


@pytest.mark.parametrize("kind", list(EntityKind), ids=lambda k: k.value)
def test_entity_templates(kind):
    text = build_entity_prompt(kind)
    assert text == build_entity_prompt(kind)
    assert f'"{kind.key}": [' in text
    assert _schema_keys(text) == [kind.key] + ENTITY_FIELDS[kind]
    assert "ORIGIN_REFERENCE" in text
    assert "Use only lowercase letters without accents" in text
    assert "Use the English language for the summary" in text
    assert "imagine a detailed explanation" in text


def test_individual_template_gate_sentence():
    text = build_entity_prompt(EntityKind.INDIVIDUAL)
    assert GATE_SENTENCE in text
    assert text.startswith("Your goal is to identify all the individuals mentioned in the document")


@pytest.mark.parametrize("kind", list(RelationKind), ids=lambda k: k.value)
def test_relation_templates(kind):
    text = DEFAULT_CATALOG.relation(kind)
    src, dst = RELATION_FIELDS[kind]
    assert f'"{kind.value}": [' in text
    assert f'"{src}"' in text and f'"{dst}"' in text
    for tag in ("==LIST 1 START==", "==LIST 1 END==", "==LIST 2 START==", "==LIST 2 END==",
                "==DOCUMENT START==", "==DOCUMENT END=="):
        assert tag in text
    assert "Use only lowercase letters without accents" in text


def test_iirto_template_keeps_reference_wording():
    text = DEFAULT_CATALOG.relation(RelationKind.INDIVIDUAL_IS_RELATED_TO_ORGANIZATION)
    assert "find the individuals that are related to an organization somehow" in text
    assert '"affected by", "member", "chief", or "other"' in text


def test_fill_is_single_pass():
    assert fill("{{A}}-{{B}}", A="{{B}}", B="x") == "{{B}}-x"
    assert fill("{{UNKNOWN}}") == "{{UNKNOWN}}"


def test_entity_user_content_carries_reference_and_text():
    content = entity_user_content(FRAG)
    assert content.startswith("ORIGIN_REFERENCE: d1.txt#0\n")
    assert content.endswith(DOC)


def test_relation_prompt_structure():
    inds = [individual(11, "pedro", "rojas"), individual(12, "maria", "soto")]
    orgs = [organization(20, "carabineros", "police")]
    kind = RelationKind.INDIVIDUAL_IS_RELATED_TO_ORGANIZATION
    request = build_relation_prompt(kind, inds, orgs, FRAG)
    assert request.system_prompt == DEFAULT_CATALOG.relation(kind)
    user = request.user_content
    l1 = user[user.index("==LIST 1 START==") + 16: user.index("==LIST 1 END==")]
    l2 = user[user.index("==LIST 2 START==") + 16: user.index("==LIST 2 END==")]
    assert json.loads(l1) == {"individual": [
        {"id": 1, "firstName": "pedro", "lastName": "rojas", "role": "unspecified", "summary": "individual pedro rojas"},
        {"id": 2, "firstName": "maria", "lastName": "soto", "role": "unspecified", "summary": "individual maria soto"},
    ]}
    assert json.loads(l2) == {"organization": [
        {"id": 3, "name": "carabineros", "nature": "police", "summary": "organization carabineros"}]}
    doc = user[user.index("==DOCUMENT START==") + 18: user.index("==DOCUMENT END==")]
    assert FRAG.text in doc and "ORIGIN_REFERENCE: d1.txt#0" in doc
    assert local_id_map(inds, orgs) == {1: 11, 2: 12, 3: 20}


def test_relation_prompt_empty_list_is_well_formed():
    kind = RelationKind.INDIVIDUAL_IS_RELATED_TO_ORGANIZATION
    request = build_relation_prompt(kind, [], [organization(1, "dina")], FRAG)
    assert '{\n  "individual": []\n}' in request.user_content


def test_part_of_prompt_lists_organizations_twice():
    orgs = [organization(5, "dina", "army"), organization(6, "ejercito de chile", "army")]
    request = build_relation_prompt(RelationKind.ORGANIZATION_IS_PART_OF_ORGANIZATION, orgs, orgs, FRAG)
    user = request.user_content
    l1 = json.loads(user[user.index("==LIST 1 START==") + 16: user.index("==LIST 1 END==")])
    l2 = json.loads(user[user.index("==LIST 2 START==") + 16: user.index("==LIST 2 END==")])
    assert l1 == l2 and [r["id"] for r in l1["organization"]] == [1, 2]
    assert local_id_map(orgs, orgs) == {1: 5, 2: 6}


def test_relation_prompt_rejects_wrong_kind():
    with pytest.raises(SignatureMismatch):
        build_relation_prompt(RelationKind.EVENT_OCCURS_AT_LOCATION, [location(1, "x")], [location(2, "y")], FRAG)
    # a dual node may stand on either side that needs one of its kinds
    build_relation_prompt(RelationKind.EVENT_OCCURS_AT_LOCATION, [event(1, "e")], [dual(2, "tenencia")], FRAG)


def test_parse_individual_identity_mapping():
    raw = json.dumps({"individual": [{"firstName": "maria", "lastName": "soto", "role": "unspecified",
                                      "summary": "wife of a detainee", "origin_reference": ["d1.txt#0"]}]})
    (e,) = parse_entity_response(EntityKind.INDIVIDUAL, raw, FRAG)
    assert e.kinds == {I} and e.id == 1
    assert e.attributes[I] == {"firstName": "maria", "lastName": "soto", "role": "unspecified"}
    assert e.summaries == ["wife of a detainee"] and e.origin_references == ["d1.txt#0"]
    assert parse_entity_response(EntityKind.INDIVIDUAL, '{"individual": []}', FRAG) == []


def test_parse_drops_and_counts_invalid_records():
    raw = json.dumps({"individual": [
        {"firstName": "maria", "lastName": "soto", "summary": "x"},
        {"lastName": "rojas", "summary": "no first name"},
    ]})
    stats = Counter()
    out = parse_entity_response(EntityKind.INDIVIDUAL, raw, FRAG, stats=stats)
    assert len(out) == 1 and stats == Counter(parsed=1, dropped=1)
    assert out[0].attributes[I]["role"] == "unspecified"


def test_parse_normalizes_text_and_dates_and_fences():
    raw = '```json\n{"event": [{"name": "Detención de Trabajadores", "date": "1973-10-07", "summary": "s"},' \
          '{"name": "Otro", "date": "octubre", "summary": "s"}]}\n```'
    a, b = parse_entity_response(EntityKind.EVENT, raw, FRAG)
    assert a.attributes[E] == {"name": "detencion de trabajadores", "date": "1973-10-07"}
    assert b.date is None


def test_parse_location_nature_out_of_vocabulary_is_undefined():
    raw = json.dumps({"location": [{"name": "Lonquén", "nature": "village", "summary": "s"},
                                   {"name": "Chile", "nature": "Country", "summary": "s"}]})
    stats = Counter()
    a, b = parse_entity_response(EntityKind.LOCATION, raw, FRAG, stats=stats)
    assert (a.name, a.nature(L)) == ("lonquen", "undefined")
    assert (b.name, b.nature(L)) == ("chile", "country")
    assert stats["coerced"] == 1


def test_model_written_references_are_replaced_by_the_fragment():
    raw = json.dumps({"organization": [{"name": "dina", "summary": "s", "origin_reference": ["other.txt#9"]}]})
    (e,) = parse_entity_response(EntityKind.ORGANIZATION, raw, FRAG)
    assert e.origin_references == ["d1.txt#0"] and e.nature(O) == "undefined"


@pytest.mark.parametrize("raw,error", [
    ("not json at all", Unparseable),
    ("[1, 2]", WrongTopLevelKey),
    ('{"people": []}', WrongTopLevelKey),
    ('{"individual": 3}', WrongTopLevelKey),
])
def test_parse_errors(raw, error):
    with pytest.raises(error):
        parse_entity_response(EntityKind.INDIVIDUAL, raw, FRAG)


def test_load_json_object_tolerates_prose():
    assert load_json_object('Sure! Here it is: {"a": 1} Hope it helps') == {"a": 1}


def test_parse_relation_remaps_and_drops_unknown_ids():
    raw = json.dumps({"IndividualIsRelatedToOrganization": [
        {"nature": "member", "individualId": 1, "organizationId": 3, "summary": "s"},
        {"nature": "chief", "individualId": 7, "organizationId": 3, "summary": "s"},
        {"nature": "chief", "individualId": "2", "organizationId": 3.0, "summary": "s"},
    ]})
    stats = Counter()
    out = parse_relation_response(RelationKind.INDIVIDUAL_IS_RELATED_TO_ORGANIZATION, raw,
                                  {1: 11, 2: 12, 3: 20}, FRAG, stats=stats)
    assert [(r.from_id, r.to_id, r.nature) for r in out] == [(11, 20, "member"), (12, 20, "chief")]
    assert stats == Counter(parsed=2, dropped=1)
    assert all(r.origin_references == ["d1.txt#0"] for r in out)


def test_parse_relation_drops_signature_violations_when_kinds_known():
    raw = json.dumps({"OrganizationIsPartOfOrganization": [{"organizationId": 1, "parentOrganizationId": 2}]})
    kinds = {10: frozenset({O}), 11: frozenset({L})}
    stats = Counter()
    assert parse_relation_response(RelationKind.ORGANIZATION_IS_PART_OF_ORGANIZATION, raw, {1: 10, 2: 11}, FRAG,
                                   stats=stats, kinds=kinds) == []
    assert stats["dropped"] == 1


def test_nature_coercion_table_by_enumeration():
    kind = RelationKind.INDIVIDUAL_IS_RELATED_TO_ORGANIZATION
    vocabulary, default = CLOSED_RELATION_NATURES[kind]
    assert set(vocabulary) == {"affected by", "member", "chief", "other"} and default == "other"
    cases = {v: (v, False) for v in INDIVIDUAL_ORGANIZATION_NATURES}
    cases.update({"Affected_By": ("affected by", False), "colleague": ("other", True), "": ("other", True),
                  None: ("other", True), 3: ("other", True), "victim": ("other", True)})
    for value, expected in cases.items():
        assert coerce_relation_nature(kind, value) == expected, value
    # open-vocabulary kinds keep (normalized) text
    assert coerce_relation_nature(RelationKind.EVENT_OCCURS_AT_LOCATION, "Inside") == ("inside", False)
    assert coerce_relation_nature(RelationKind.EVENT_OCCURS_AT_LOCATION, None) == (None, False)


def test_colleague_nature_coerced_in_parse():
    raw = json.dumps({"IndividualIsRelatedToOrganization": [
        {"nature": "colleague", "individualId": 1, "organizationId": 2, "summary": "s"}]})
    stats = Counter()
    (r,) = parse_relation_response(RelationKind.INDIVIDUAL_IS_RELATED_TO_ORGANIZATION, raw, {1: 1, 2: 2}, FRAG,
                                   stats=stats)
    assert r.nature == "other" and stats["coerced"] == 1


json_values = st.recursive(
    st.none() | st.booleans() | st.integers() | st.floats(allow_nan=False) | st.text(max_size=10),
    lambda children: st.lists(children, max_size=4) | st.dictionaries(
        st.sampled_from(["individual", "firstName", "lastName", "summary", "role", "name", "nature", "date",
                         "individualId", "organizationId", "x"]), children, max_size=5),
    max_leaves=20,
)


@settings(max_examples=300, deadline=None)
@given(st.one_of(st.text(max_size=60), json_values.map(json.dumps)))
def test_parsing_is_total(raw):
    for kind in EntityKind:
        try:
            out = parse_entity_response(kind, raw, FRAG)
        except ParseError:
            continue
        for e in out:
            from histkg.ontology import check_entity
            check_entity(e)
    try:
        parse_relation_response(RelationKind.INDIVIDUAL_IS_RELATED_TO_ORGANIZATION, raw, {1: 1, 2: 2}, FRAG)
    except ParseError:
        pass


def _gateway(fixtures):
    return Gateway(mock_backend(fixtures), GatewayConfig(retry_backoff=0))


def test_extract_fragment_runs_entities_then_relations_and_skips_empty_lists():
    fixtures = [
        {"system_contains": "identify all the individuals", "user_contains": "Pedro",
         "response": {"individual": [{"firstName": "pedro", "lastName": "rojas", "summary": "s"}]}},
        {"system_contains": "identify all the locations", "user_contains": "Pedro",
         "response": {"location": [{"name": "isla de maipo", "nature": "city", "summary": "s"}]}},
        {"system_contains": "identify all the events", "user_contains": "Pedro",
         "response": {"event": [{"name": "detention", "date": "1973-10-07", "summary": "s"}]}},
        {"system_contains": '"IndividualIsRelatedToEvent"', "user_contains": "Pedro",
         "response": {"IndividualIsRelatedToEvent": [{"individualId": 1, "eventId": 2, "summary": "s"},
                                                     {"individualId": 1, "eventId": 9, "summary": "s"}]}},
        {"system_contains": '"EventOccursAtLocation"', "user_contains": "Pedro", "response": "garbage"},
    ]
    gw = _gateway(fixtures)
    result = extract_fragment(FRAG, gw)
    assert [(e.id, e.primary_kind) for e in result.entities] == [(1, I), (2, E), (3, L)]
    assert [(r.kind, r.from_id, r.to_id) for r in result.relations] == [
        (RelationKind.INDIVIDUAL_IS_RELATED_TO_EVENT, 1, 2)]
    # no organizations: IIRTO, OWPAL, OIPOO, OIRTE skipped; IIRTE, EOAL, LICIL called
    assert result.calls_skipped == 4
    assert gw.stats.requests == 4 + 3
    assert result.stats["IndividualIsRelatedToEvent"] == {"parsed": 1, "dropped": 1}
    assert result.stats["EventOccursAtLocation"] == {"unparseable": 1}
    assert result.stats["Organization"] == {}
    assert FragmentExtraction.from_dict(json.loads(json.dumps(result.to_dict()))).to_dict() == result.to_dict()


def test_extract_fragment_wraps_gateway_errors():
    class Down:
        def chat(self, request, model, timeout):
            from histkg.gateway import BackendError
            raise BackendError("down")

    gw = Gateway(Down(), GatewayConfig(retry_backoff=0))
    with pytest.raises(ExtractionError) as info:
        extract_fragment(FRAG, gw)
    assert info.value.origin_reference == "d1.txt#0"
