import json
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sdrtparse.corpus_io import (
    CDU,
    Corpus,
    CorpusFormatError,
    CorpusStats,
    RawDialogue,
    RawRelation,
    Split,
    corpus_stats,
    dialogue_stats,
    load_canonical,
    load_corpus,
    write_corpus,
)
from sdrtparse.graph import MSDC_TAXONOMY, STAC_TAXONOMY, ElementaryUnit, UnitKind

from synth import random_corpus, random_raw_with_cdus

EDU, EEU = UnitKind.EDU, UnitKind.EEU


def units(*kinds, turns=None):
    turns = turns or list(range(len(kinds)))
    return tuple(
        ElementaryUnit(i, k, "Builder" if k is EEU else "Architect", f"u{i}", t) for i, (k, t) in enumerate(zip(kinds, turns))
    )


def one(d):
    return Corpus("c", Split.TEST, (d,), MSDC_TAXONOMY)


def test_canonical_roundtrip_small(tmp_path):
    d = RawDialogue("d1", units(EDU, EDU, EEU), (RawRelation("RES", 0, 2), RawRelation("ACK", 1, 2)))
    p = tmp_path / "c.jsonl"
    write_corpus(one(d), p)
    back = load_canonical(p)
    assert back == one(d)
    assert len(back.dialogues) == 1 and len(back.dialogues[0].units) == 3 and len(back.dialogues[0].relations) == 2


def test_empty_corpus_has_header_only(tmp_path):
    p = tmp_path / "e.jsonl"
    write_corpus(Corpus("e", Split.TRAIN, (), MSDC_TAXONOMY), p)
    lines = p.read_text().splitlines()
    assert len(lines) == 1
    assert json.loads(lines[0])["format"] == "sdrt-canonical"
    assert load_canonical(p).dialogues == ()


def test_cdus_preserved_verbatim(tmp_path):
    d = RawDialogue(
        "d",
        units(EDU, EDU, EDU, EDU, EDU, EDU, EDU),
        (RawRelation("ELAB", 2, "c1"), RawRelation("RES", "c2", 6)),
        (CDU("c1", (3, 4)), CDU("c2", ("c1", 5))),
    )
    p = tmp_path / "c.jsonl"
    write_corpus(one(d), p)
    assert load_canonical(p).dialogues[0] == d


@given(seed=st.integers(0, 2**32 - 1))
@settings(max_examples=30, deadline=None)
def test_roundtrip_property(seed, tmp_path_factory):
    rng = random.Random(seed)
    corpus = random_corpus(rng, rng.randint(0, 5), max_units=25)
    raw = tuple(random_raw_with_cdus(rng, f"r{i}", rng.randint(2, 12)) for i in range(2))
    raw = tuple(RawDialogue(d.dialogue_id, d.units, tuple(r for r in d.relations if not (r.is_flat() and r.src >= r.tgt)), d.cdus) for d in raw)
    corpus = Corpus(corpus.name, corpus.split, corpus.dialogues + raw, corpus.taxonomy)
    p = tmp_path_factory.mktemp("rt") / "c.jsonl"
    write_corpus(corpus, p)
    assert load_canonical(p) == corpus


def _write(tmp_path, header, *records):
    p = tmp_path / "bad.jsonl"
    p.write_text("\n".join(json.dumps(x) for x in (header,) + records) + "\n")
    return p


HEADER = {"format": "sdrt-canonical", "version": 1, "name": "x", "split": "test", "taxonomy": "msdc"}
UNITS = [{"idx": i, "kind": "EDU", "speaker": "A", "text": "t", "turn": i} for i in range(3)]


def test_missing_unit_names_dialogue(tmp_path):
    p = _write(tmp_path, HEADER, {"id": "dlg7", "units": UNITS, "relations": [{"label": "RES", "src": 0, "tgt": 9}]})
    with pytest.raises(CorpusFormatError, match="dlg7") as e:
        load_canonical(p)
    assert "missing unit" in str(e.value)


@pytest.mark.parametrize(
    "rel, msg",
    [
        ({"label": "FOO", "src": 0, "tgt": 1}, "unknown relation label"),
        ({"label": "RES", "src": 0, "tgt": "c9"}, "missing CDU"),
        ({"label": "RES", "src": 2, "tgt": 1}, "forward"),
    ],
)
def test_schema_violations(tmp_path, rel, msg):
    with pytest.raises(CorpusFormatError, match=msg):
        load_canonical(_write(tmp_path, HEADER, {"id": "d", "units": UNITS, "relations": [rel]}))


def test_bad_header_and_json(tmp_path):
    p = tmp_path / "x.jsonl"
    p.write_text("")
    with pytest.raises(CorpusFormatError):
        load_canonical(p)
    p.write_text(json.dumps(HEADER) + "\n{not json\n")
    with pytest.raises(CorpusFormatError, match="invalid JSON"):
        load_canonical(p)
    with pytest.raises(CorpusFormatError):
        load_corpus(tmp_path / "nope.jsonl")


def test_stats_example():
    d = RawDialogue("d", units(EDU, EDU, EEU), (RawRelation("RES", 0, 2), RawRelation("ACK", 1, 2)))
    assert dialogue_stats(d) == CorpusStats(2, 1, 1, 0, 0)


def test_stats_refuse_unflattened():
    d = RawDialogue("d", units(EDU, EDU, EDU), (RawRelation("RES", 0, "c"),), (CDU("c", (1, 2)),))
    with pytest.raises(ValueError, match="preprocess"):
        dialogue_stats(d)


def test_stats_sum_over_dialogues():
    rng = random.Random(4)
    c = random_corpus(rng, 10)
    total = corpus_stats(c)
    assert total.edu_count + total.eeu_count == sum(len(d.units) for d in c.dialogues)


# --- adapters

MSDC_DIALOGUES = [
    {
        "id": "C1",
        "edus": [
            {"speaker": "Architect", "text": "put a blue block down"},
            {"speaker": "Builder", "text": "place blue 1 1 1"},
            {"speaker": "Builder", "text": "place blue 1 2 1"},
            {"speaker": "Architect", "text": "perfect"},
            {"speaker": "Builder", "text": "thanks"},
        ],
        "relations": [
            {"type": "Result", "x": 0, "y": 1},
            {"type": "Result", "x": 0, "y": 2},
            {"type": "Acknowledgement", "x": 2, "y": 3},
            {"type": "Frobnicate", "x": 3, "y": 4},
            {"type": "Comment", "x": 4, "y": 3},
            {"type": "Comment", "x": 3, "y": 9},
            {"type": "Result", "x": 0, "y": 1},
        ],
    }
]


def test_msdc_adapter(tmp_path):
    p = tmp_path / "msdc.json"
    p.write_text(json.dumps(MSDC_DIALOGUES))
    c = load_corpus(p, "msdc")
    d = c.dialogues[0]
    assert [u.kind for u in d.units] == [EDU, EEU, EEU, EDU, EDU]
    assert [u.turn_id for u in d.units] == [0, 1, 1, 2, 3]
    assert [(r.label, r.src, r.tgt) for r in d.relations] == [("RES", 0, 1), ("RES", 0, 2), ("ACK", 2, 3)]
    assert sorted(x.reason for x in c.discards) == ["backward", "dangling_endpoint", "duplicate", "unknown_label"]


def test_msdc_adapter_jsonl(tmp_path):
    p = tmp_path / "msdc.jsonl"
    p.write_text("\n".join(json.dumps(x) for x in MSDC_DIALOGUES * 1))
    assert len(load_corpus(p, "msdc").dialogues) == 1


GLOZZ_TEXT = "hi there anyone has wood? Bob rolled a 6. yes"


def _unit(uid, utype, start, end, feats=None):
    f = "".join(f'<feature name="{k}">{v}</feature>' for k, v in (feats or {}).items())
    return (
        f'<unit id="{uid}"><characterisation><type>{utype}</type><featureSet>{f}</featureSet></characterisation>'
        f'<positioning><start><singlePosition index="{start}"/></start><end><singlePosition index="{end}"/></end></positioning></unit>'
    )


def _rel(rid, label, a, b):
    return (
        f'<relation id="{rid}"><characterisation><type>{label}</type></characterisation>'
        f'<positioning><term id="{a}"/><term id="{b}"/></positioning></relation>'
    )


def glozz_xml():
    units = [
        _unit("t1", "Turn", 0, 25, {"Emitter": "alice"}),
        _unit("s1", "Segment", 0, 8),
        _unit("s2", "Segment", 9, 25),
        _unit("t2", "Turn", 26, 41, {"Emitter": "Server"}),
        _unit("s3", "Segment", 26, 41),
        _unit("t3", "Turn", 42, 45, {"Emitter": "bob"}),
        _unit("s4", "Segment", 42, 45),
    ]
    schema = (
        '<schema id="cdu1"><characterisation><type>Complex_discourse_unit</type></characterisation>'
        '<positioning><embedded-unit id="s1"/><embedded-unit id="s2"/></positioning></schema>'
    )
    rels = [_rel("r1", "Question-answer_pair", "cdu1", "s4"), _rel("r2", "Result", "s2", "s3"), _rel("r3", "Bogus", "s1", "s2")]
    return f'<?xml version="1.0"?><annotations>{"".join(units)}{"".join(rels)}{schema}</annotations>'


def test_glozz_adapter(tmp_path):
    (tmp_path / "game1.aa").write_text(glozz_xml())
    (tmp_path / "game1.ac").write_text(GLOZZ_TEXT)
    c = load_corpus(tmp_path, "stac_glozz")
    assert c.taxonomy is STAC_TAXONOMY
    d = c.dialogues[0]
    assert [u.text for u in d.units] == ["hi there", "anyone has wood?", "Bob rolled a 6.", "yes"]
    assert [u.kind for u in d.units] == [EDU, EDU, EEU, EDU]
    assert [u.turn_id for u in d.units] == [0, 0, 1, 2]
    assert d.cdus == (CDU("cdu1", (0, 1)),)
    assert set((r.label, r.src, r.tgt) for r in d.relations) == {("QAP", "cdu1", 3), ("RES", 1, 2)}
    assert [x.reason for x in c.discards] == ["unknown_label"]


def test_glozz_parse_error(tmp_path):
    (tmp_path / "broken.aa").write_text("<annotations><unit>")
    with pytest.raises(CorpusFormatError):
        load_corpus(tmp_path / "broken.aa", "stac_glozz")


def test_molweni_reads_canonical(tmp_path):
    d = RawDialogue("m", units(EDU, EDU), (RawRelation("QAP", 0, 1),))
    p = tmp_path / "m.jsonl"
    write_corpus(one(d), p)
    assert load_corpus(p, "molweni").taxonomy.taxonomy_id == "molweni"
