import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sdrtparse.graph import (
    MSDC_TAXONOMY,
    STAC_TAXONOMY,
    DiscourseGraph,
    ElementaryUnit,
    RelationInstance,
    UnitKind,
    Violation,
    add_relation,
    distance,
    format_relations,
    mpdu_set,
    parse_relations,
    topological_order,
    validate,
)


def R(label, i, j):
    return RelationInstance(i, j, label)


def test_msdc_taxonomy_has_the_sixteen_types():
    names = [lab.long_name for lab in MSDC_TAXONOMY]
    assert names == [
        "Result", "Acknowledgement", "Narration", "Elaboration", "Correction", "Continuation",
        "Question-answer Pair", "Comment", "Confirmation-Question", "Clarification-Question",
        "Contrast", "Question-Elaboration", "Alternation", "Explanation", "Conditional", "Sequence",
    ]
    for code in ("RES", "CORR", "ACK", "QAP", "CLARIFQ", "CONFQ", "QELAB"):
        assert code in MSDC_TAXONOMY
    assert len(set(MSDC_TAXONOMY.codes)) == 16


def test_taxonomy_lookup_by_long_name():
    assert STAC_TAXONOMY.lookup("Question-answer_pair") == "QAP"
    assert STAC_TAXONOMY.lookup("question answer pair") == "QAP"
    assert MSDC_TAXONOMY.lookup("Clarification_question") == "CLARIFQ"
    assert MSDC_TAXONOMY.lookup("Bogus") is None


def test_unit_rejects_empty_text():
    with pytest.raises(ValueError):
        ElementaryUnit(0, UnitKind.EDU, "A", "", 0)


def test_add_to_empty_graph():
    g, note = add_relation(DiscourseGraph("d", 2), R("RES", 0, 1))
    assert len(g) == 1 and note is None


def test_add_duplicate_is_ignored_with_note():
    g, _ = add_relation(DiscourseGraph("d", 2), R("RES", 0, 1))
    g2, note = add_relation(g, R("RES", 0, 1))
    assert g2 == g and note == "duplicate"


def test_add_out_of_range():
    with pytest.raises(ValueError, match="out of range"):
        add_relation(DiscourseGraph("d", 3), R("ACK", 1, 5))


def test_add_backward():
    with pytest.raises(ValueError, match="forward"):
        add_relation(DiscourseGraph("d", 6), R("RES", 5, 2))


def test_validate_well_formed():
    g = DiscourseGraph.build("d", 3, [R("RES", 0, 1), R("ACK", 1, 2)])
    assert len(validate(g, MSDC_TAXONOMY)) == 0


def test_validate_unknown_label():
    rep = validate(DiscourseGraph("d", 2, (R("FOO", 0, 1),)), MSDC_TAXONOMY)
    assert [k for k, _ in rep.violations] == [Violation.UNKNOWN_LABEL]


def test_validate_index_order():
    rep = validate(DiscourseGraph("d", 6, (R("RES", 5, 2),)), MSDC_TAXONOMY)
    assert [k for k, _ in rep.violations] == [Violation.INDEX_ORDER]


def test_validate_duplicate_and_range():
    rep = validate(DiscourseGraph("d", 3, (R("RES", 0, 1), R("RES", 0, 1), R("ACK", 1, 7))), MSDC_TAXONOMY)
    kinds = sorted(k.value for k, _ in rep.violations)
    assert kinds == ["duplicate", "out_of_range"]


def test_validate_counts_multi_label_pairs_without_rejecting():
    g = DiscourseGraph.build("d", 2, [R("RES", 0, 1), R("ACK", 0, 1)])
    rep = validate(g, MSDC_TAXONOMY)
    assert len(rep) == 0 and rep.multi_label_pairs == 1


def test_mpdu_examples():
    assert mpdu_set(DiscourseGraph.build("d", 3, [R("RES", 0, 2), R("QAP", 1, 2)])).units == {2}
    assert mpdu_set(DiscourseGraph("d", 0)).units == frozenset()
    m = mpdu_set(DiscourseGraph.build("d", 4, [R("RES", 0, 3), R("ACK", 1, 3), R("CORR", 2, 3)]))
    assert m.units == {3} and m.exactly3 == 1 and m.more_than3 == 0


@pytest.mark.parametrize(
    "rel, d", [(R("RES", 0, 1), 1), (R("NARR", 3, 13), 10), (R("NARR", 2, 17), 15)]
)
def test_distance(rel, d):
    assert distance(rel) == d


def test_token_roundtrip_and_order():
    text = format_relations([R("QAP", 1, 2), R("RES", 0, 1)])
    assert text == "RES(0,1) QAP(1,2)"
    assert parse_relations(text) == [R("RES", 0, 1), R("QAP", 1, 2)]


def test_graph_equality_ignores_insertion_order():
    a = DiscourseGraph.build("d", 4, [R("RES", 0, 1), R("ACK", 2, 3)])
    b = DiscourseGraph.build("d", 4, [R("ACK", 2, 3), R("RES", 0, 1)])
    assert a == b


edges = st.integers(2, 50).flatmap(
    lambda n: st.tuples(
        st.just(n),
        st.lists(
            st.tuples(st.integers(0, n - 1), st.integers(0, n - 1), st.sampled_from(MSDC_TAXONOMY.codes)),
            max_size=80,
        ),
    )
)


@given(edges)
@settings(max_examples=200, deadline=None)
def test_construction_and_validation_agree(data):
    n, triples = data
    g = DiscourseGraph("d", n)
    for i, j, lab in triples:
        if i < j:
            g, _ = add_relation(g, R(lab, i, j))
    assert len(validate(g, MSDC_TAXONOMY)) == 0
    assert topological_order(n, [r.pair for r in g]) is not None
    assert all(distance(r) >= 1 for r in g)


@given(edges)
@settings(max_examples=200, deadline=None)
def test_mpdu_matches_brute_force(data):
    n, triples = data
    g = DiscourseGraph.build("d", n, [R(lab, i, j) for i, j, lab in triples if i < j])
    rels = list(g.relations)
    brute = {u for u in range(n) if sum(1 for r in rels if r.target == u) >= 2}
    three = sum(1 for u in range(n) if sum(1 for r in rels if r.target == u) == 3)
    m = mpdu_set(g)
    assert m.units == brute and m.exactly3 == three


def test_cycle_detected_independently_of_order_check():
    g = DiscourseGraph("d", 3, (R("RES", 0, 1), R("RES", 1, 2), R("RES", 2, 0)))
    kinds = {k for k, _ in validate(g, MSDC_TAXONOMY).violations}
    assert Violation.CYCLE in kinds and Violation.INDEX_ORDER in kinds


def test_random_build_is_sorted_and_deduplicated():
    rng = random.Random(3)
    rels = [R("RES", i, i + 1 + rng.randrange(3)) for i in range(20)] * 2
    g = DiscourseGraph.build("d", 30, rels)
    assert list(g.relations) == sorted(set(rels))
