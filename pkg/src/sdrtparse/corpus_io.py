"""Corpus loading/writing in the canonical line-delimited format, plus adapters.

Canonical file layout (UTF-8, one JSON object per line)::

    {"format": "sdrt-canonical", "version": 1, "name": ..., "split": ..., "taxonomy": ...}
    {"id": ..., "units": [{"idx", "kind", "speaker", "text", "turn"}, ...],
     "relations": [{"label", "src", "tgt"}, ...], "cdus": [{"id", "members"}, ...]}
    ...

Relation endpoints and CDU members are unit indices (ints) or CDU ids
(non-numeric strings).
"""

from __future__ import annotations

import json
import logging
import os
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Union

from .graph import DiscourseGraph, ElementaryUnit, RelationInstance, Taxonomy, UnitKind, get_taxonomy, mpdu_set

log = logging.getLogger(__name__)

FORMAT_TAG = "sdrt-canonical"
FORMAT_VERSION = 1

Endpoint = Union[int, str]


class CorpusFormatError(ValueError):
    """Unreadable or schema-violating corpus input."""

    def __init__(self, message: str, dialogue_id: str | None = None, record: object = None):
        where = f" [dialogue {dialogue_id}]" if dialogue_id is not None else ""
        what = f": {json.dumps(record, ensure_ascii=False)}" if record is not None else ""
        super().__init__(f"{message}{where}{what}")
        self.dialogue_id = dialogue_id
        self.record = record


class Split(str, Enum):
    TRAIN = "train"
    DEV = "dev"
    TEST = "test"


@dataclass(frozen=True)
class RawRelation:
    """A relation whose endpoints may still name CDUs."""

    label: str
    src: Endpoint
    tgt: Endpoint

    def is_flat(self) -> bool:
        return isinstance(self.src, int) and isinstance(self.tgt, int)

    def to_instance(self) -> RelationInstance:
        assert self.is_flat(), self
        return RelationInstance(self.src, self.tgt, self.label)  # type: ignore[arg-type]


@dataclass(frozen=True)
class CDU:
    cdu_id: str
    members: tuple[Endpoint, ...]


@dataclass(frozen=True)
class RawDialogue:
    dialogue_id: str
    units: tuple[ElementaryUnit, ...]
    relations: tuple[RawRelation, ...] = ()
    cdus: tuple[CDU, ...] = ()

    def __post_init__(self) -> None:
        for pos, unit in enumerate(self.units):
            if unit.index != pos:
                raise CorpusFormatError(f"unit indices not contiguous at {pos}", self.dialogue_id)
            if pos and unit.turn_id < self.units[pos - 1].turn_id:
                raise CorpusFormatError(f"turn ids decrease at unit {pos}", self.dialogue_id)
        for cdu in self.cdus:
            if _is_index_like(cdu.cdu_id):
                raise CorpusFormatError(f"CDU id {cdu.cdu_id!r} looks like a unit index", self.dialogue_id)

    @property
    def has_cdu_refs(self) -> bool:
        return bool(self.cdus) or not all(r.is_flat() for r in self.relations)

    def graph(self) -> DiscourseGraph:
        """The relation structure as a :class:`DiscourseGraph` (CDUs must be flattened)."""
        if self.has_cdu_refs:
            raise ValueError(f"dialogue {self.dialogue_id} still contains CDUs")
        return DiscourseGraph.build(
            self.dialogue_id, len(self.units), (r.to_instance() for r in self.relations)
        )

    def turns(self) -> list[list[int]]:
        """Unit indices grouped by turn, in dialogue order."""
        groups: list[list[int]] = []
        last = None
        for u in self.units:
            if u.turn_id != last:
                groups.append([])
                last = u.turn_id
            groups[-1].append(u.index)
        return groups


def _is_index_like(value: str) -> bool:
    return value.strip().lstrip("-").isdigit()


@dataclass(frozen=True)
class Discard:
    """An annotation dropped by an adapter or a preprocessing stage."""

    dialogue_id: str
    reason: str
    record: str


@dataclass(frozen=True)
class Corpus:
    name: str
    split: Split
    dialogues: tuple[RawDialogue, ...]
    taxonomy: Taxonomy
    discards: tuple[Discard, ...] = field(default=(), compare=False)

    def __post_init__(self) -> None:
        ids = [d.dialogue_id for d in self.dialogues]
        if len(set(ids)) != len(ids):
            dup = next(i for i in ids if ids.count(i) > 1)
            raise CorpusFormatError("duplicate dialogue id", dup)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Corpus):
            return NotImplemented
        return (
            self.name == other.name
            and self.split == other.split
            and self.taxonomy.taxonomy_id == other.taxonomy.taxonomy_id
            and self.dialogues == other.dialogues
        )

    __hash__ = None  # type: ignore[assignment]

    def by_id(self) -> dict[str, RawDialogue]:
        return {d.dialogue_id: d for d in self.dialogues}

    def gold_graphs(self) -> dict[str, DiscourseGraph]:
        return {d.dialogue_id: d.graph() for d in self.dialogues}


# ---------------------------------------------------------------------------
# canonical format


def _unit_record(u: ElementaryUnit) -> dict:
    return {"idx": u.index, "kind": u.kind.value, "speaker": u.speaker, "text": u.text, "turn": u.turn_id}


def dialogue_to_record(d: RawDialogue) -> dict:
    return {
        "id": d.dialogue_id,
        "units": [_unit_record(u) for u in d.units],
        "relations": [{"label": r.label, "src": r.src, "tgt": r.tgt} for r in d.relations],
        "cdus": [{"id": c.cdu_id, "members": list(c.members)} for c in d.cdus],
    }


def dumps_line(obj: object) -> str:
    return json.dumps(obj, ensure_ascii=False, separators=(",", ":"))


def write_corpus(corpus: Corpus, path: str | os.PathLike) -> None:
    header = {
        "format": FORMAT_TAG,
        "version": FORMAT_VERSION,
        "name": corpus.name,
        "split": corpus.split.value,
        "taxonomy": corpus.taxonomy.taxonomy_id,
        "dialogues": len(corpus.dialogues),
    }
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(dumps_line(header) + "\n")
        for d in corpus.dialogues:
            f.write(dumps_line(dialogue_to_record(d)) + "\n")


def _endpoint(value: object, did: str, rec: object) -> Endpoint:
    if isinstance(value, bool) or not isinstance(value, (int, str)):
        raise CorpusFormatError("endpoint must be an int or a CDU id", did, rec)
    return value


def dialogue_from_record(rec: dict, taxonomy: Taxonomy) -> RawDialogue:
    did = rec.get("id") if isinstance(rec, dict) else None
    if not isinstance(rec, dict) or not isinstance(did, str):
        raise CorpusFormatError("record lacks a string 'id'", None, rec)
    try:
        units = tuple(
            ElementaryUnit(int(u["idx"]), UnitKind(u["kind"]), str(u["speaker"]), str(u["text"]), int(u["turn"]))
            for u in rec["units"]
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise CorpusFormatError(f"bad unit record ({exc})", did) from exc
    cdus = []
    for c in rec.get("cdus", []):
        try:
            cdus.append(CDU(str(c["id"]), tuple(_endpoint(m, did, c) for m in c["members"])))
        except (KeyError, TypeError) as exc:
            raise CorpusFormatError("bad CDU record", did, c) from exc
    cdu_ids = {c.cdu_id for c in cdus}
    relations = []
    for r in rec.get("relations", []):
        try:
            rel = RawRelation(str(r["label"]), _endpoint(r["src"], did, r), _endpoint(r["tgt"], did, r))
        except (KeyError, TypeError) as exc:
            raise CorpusFormatError("bad relation record", did, r) from exc
        if rel.label not in taxonomy:
            raise CorpusFormatError(f"unknown relation label {rel.label!r}", did, r)
        for end in (rel.src, rel.tgt):
            if isinstance(end, int) and not 0 <= end < len(units):
                raise CorpusFormatError("relation endpoint references missing unit", did, r)
            if isinstance(end, str) and end not in cdu_ids:
                raise CorpusFormatError("relation endpoint references missing CDU", did, r)
        if rel.is_flat() and rel.src >= rel.tgt:  # type: ignore[operator]
            raise CorpusFormatError("relation does not point forward", did, r)
        relations.append(rel)
    return RawDialogue(did, units, tuple(relations), tuple(cdus))


def load_canonical(path: str | os.PathLike, taxonomy: Taxonomy | None = None) -> Corpus:
    try:
        with open(path, encoding="utf-8") as f:
            lines = [ln for ln in f.read().split("\n") if ln.strip()]
    except (OSError, UnicodeDecodeError) as exc:
        raise CorpusFormatError(f"cannot read {path}: {exc}") from exc
    if not lines:
        raise CorpusFormatError(f"{path}: empty file, missing header")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise CorpusFormatError(f"{path}: bad header line") from exc
    if not isinstance(header, dict) or header.get("format") != FORMAT_TAG:
        raise CorpusFormatError(f"{path}: not a canonical corpus file", None, header)
    if header.get("version") != FORMAT_VERSION:
        raise CorpusFormatError(f"{path}: unsupported version {header.get('version')}")
    try:
        tax = taxonomy or get_taxonomy(header["taxonomy"])
        split = Split(header["split"])
    except (KeyError, ValueError) as exc:
        raise CorpusFormatError(f"{path}: bad header ({exc})", None, header) from exc
    dialogues = []
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise CorpusFormatError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
        dialogues.append(dialogue_from_record(rec, tax))
    return Corpus(str(header.get("name", Path(path).stem)), split, tuple(dialogues), tax)


# ---------------------------------------------------------------------------
# adapters

ACTION_PREFIXES = ("place ", "pick ", "remove ")


class _DiscardLog:
    def __init__(self) -> None:
        self.items: list[Discard] = []

    def add(self, did: str, reason: str, record: object) -> None:
        rec = record if isinstance(record, str) else dumps_line(record)
        log.info("discard [%s] %s: %s", did, reason, rec)
        self.items.append(Discard(did, reason, rec))


def _adapt_relations(
    did: str,
    raw: Iterable[tuple[str, Endpoint, Endpoint, object]],
    taxonomy: Taxonomy,
    n_units: int,
    cdu_ids: set[str],
    discards: _DiscardLog,
) -> tuple[RawRelation, ...]:
    out: list[RawRelation] = []
    seen: set[RawRelation] = set()
    for label_name, src, tgt, record in raw:
        code = taxonomy.lookup(label_name)
        if code is None:
            discards.add(did, "unknown_label", record)
            continue
        if any((isinstance(e, int) and not 0 <= e < n_units) or (isinstance(e, str) and e not in cdu_ids) for e in (src, tgt)):
            discards.add(did, "dangling_endpoint", record)
            continue
        if isinstance(src, int) and isinstance(tgt, int):
            if src == tgt:
                discards.add(did, "self_loop", record)
                continue
            if src > tgt:
                discards.add(did, "backward", record)
                continue
        rel = RawRelation(code, src, tgt)
        if rel in seen:
            discards.add(did, "duplicate", record)
            continue
        seen.add(rel)
        out.append(rel)
    return tuple(out)


def _json_dialogues(path: str | os.PathLike) -> list[dict]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise CorpusFormatError(f"cannot read {path}: {exc}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError:
        try:
            data = [json.loads(ln) for ln in text.splitlines() if ln.strip()]
        except json.JSONDecodeError as exc:
            raise CorpusFormatError(f"{path}: neither JSON nor JSON lines ({exc.msg})") from exc
    if isinstance(data, dict):
        data = data.get("dialogues", [data])
    if not isinstance(data, list):
        raise CorpusFormatError(f"{path}: expected a list of dialogues")
    return data


def _is_action(edu: dict) -> bool:
    kind = str(edu.get("kind", edu.get("type", ""))).lower()
    if kind in ("eeu", "action", "nonling"):
        return True
    if kind in ("edu", "chat"):
        return False
    return str(edu.get("speaker", "")).lower() == "builder" and str(edu.get("text", "")).lower().startswith(ACTION_PREFIXES)


def load_msdc(path: str | os.PathLike, taxonomy: Taxonomy, name: str | None = None, split: Split = Split.TEST) -> Corpus:
    """Read the JSON dialogue-list layout used by the MSDC distribution.

    Each dialogue is ``{"id", "edus": [{"speaker", "text", ...}], "relations":
    [{"type", "x", "y"}], "cdus"?: [{"id", "members"}]}``. Builder moves are
    recognised by an explicit ``kind``/``type`` field or by their action verb.
    Turns come from a ``turn``/``turn_id`` field when present, otherwise a new
    turn starts whenever speaker or unit kind changes.
    """
    discards = _DiscardLog()
    dialogues = []
    for pos, rec in enumerate(_json_dialogues(path)):
        did = str(rec.get("id", rec.get("dialogue_id", f"dialogue_{pos}")))
        edus = rec.get("edus")
        if not isinstance(edus, list):
            raise CorpusFormatError("missing 'edus' list", did)
        units = []
        turn, prev_key = -1, None
        for i, e in enumerate(edus):
            kind = UnitKind.EEU if _is_action(e) else UnitKind.EDU
            speaker = str(e.get("speaker", ""))
            explicit = e.get("turn", e.get("turn_id"))
            if explicit is not None:
                turn = max(turn, int(explicit))
            elif (speaker, kind) != prev_key:
                turn += 1
            prev_key = (speaker, kind)
            text = " ".join(str(e.get("text", "")).split()) or "<empty>"
            units.append(ElementaryUnit(i, kind, speaker, text, turn))
        # explicit turn ids may start anywhere; normalise to 0-based ranks
        ranks = {t: r for r, t in enumerate(sorted({u.turn_id for u in units}))}
        units = [ElementaryUnit(u.index, u.kind, u.speaker, u.text, ranks[u.turn_id]) for u in units]
        cdus = tuple(CDU(str(c["id"]), tuple(_json_endpoint(m) for m in c["members"])) for c in rec.get("cdus", []))
        raw = [(str(r.get("type", r.get("label", ""))), _json_endpoint(r.get("x")), _json_endpoint(r.get("y")), r) for r in rec.get("relations", [])]
        rels = _adapt_relations(did, raw, taxonomy, len(units), {c.cdu_id for c in cdus}, discards)
        dialogues.append(RawDialogue(did, tuple(units), rels, cdus))
    return Corpus(name or Path(path).stem, split, tuple(dialogues), taxonomy, tuple(discards.items))


def _json_endpoint(value: object) -> Endpoint:
    if isinstance(value, int) and not isinstance(value, bool):
        return value
    if isinstance(value, str):
        return int(value) if _is_index_like(value) else value
    return -1  # reported as dangling


# --- STAC glozz (.aa XML + .ac text)

NONPLAYER_EMITTERS = {"server", "ui"}
CDU_SCHEMA_TYPES = {"complex_discourse_unit"}
EEU_UNIT_TYPES = {"nonplayersegment"}


def _features(node: ET.Element) -> dict[str, str]:
    return {f.get("name", ""): (f.text or "").strip() for f in node.iter("feature")}


def _span(node: ET.Element) -> tuple[int, int]:
    start = node.find("positioning/start/singlePosition")
    end = node.find("positioning/end/singlePosition")
    if start is None or end is None:
        return (-1, -1)
    return int(start.get("index", -1)), int(end.get("index", -1))


def _glozz_file(aa_path: Path, taxonomy: Taxonomy, discards: _DiscardLog) -> list[RawDialogue]:
    try:
        root = ET.parse(aa_path).getroot()
    except (OSError, ET.ParseError) as exc:
        raise CorpusFormatError(f"cannot parse {aa_path}: {exc}") from exc
    ac_path = aa_path.with_suffix(".ac")
    text = ac_path.read_text(encoding="utf-8") if ac_path.exists() else ""

    turns, segments, dialogues_spans = [], [], []
    for unit in root.iter("unit"):
        utype = (unit.findtext("characterisation/type") or "").strip()
        entry = (unit.get("id", ""), utype, _span(unit), _features(unit))
        low = utype.lower()
        if low == "turn":
            turns.append(entry)
        elif low == "dialogue":
            dialogues_spans.append(entry)
        elif low in ("segment",) or low in EEU_UNIT_TYPES:
            segments.append(entry)
    segments.sort(key=lambda e: (e[2][0], e[2][1], e[0]))
    if not dialogues_spans:
        dialogues_spans = [(aa_path.stem, "Dialogue", (-1, 1 << 62), {})]
    dialogues_spans.sort(key=lambda e: e[2])

    def covering(span: tuple[int, int], pool: list) -> tuple | None:
        for e in pool:
            if e[2][0] <= span[0] and span[1] <= e[2][1]:
                return e
        return None

    relations = []
    for rel in root.iter("relation"):
        terms = [t.get("id", "") for t in rel.iter("term")]
        label = (rel.findtext("characterisation/type") or "").strip()
        relations.append((rel.get("id", ""), label, terms))
    schemas = {}
    for sch in root.iter("schema"):
        stype = (sch.findtext("characterisation/type") or "").strip()
        pos = sch.find("positioning")
        members = [] if pos is None else [m.get("id", "") for m in pos if m.tag in ("embedded-unit", "embedded-schema")]
        schemas[sch.get("id", "")] = (stype, members)

    out = []
    for d_id, _, d_span, _ in dialogues_spans:
        did = f"{aa_path.stem}:{d_id}" if len(dialogues_spans) > 1 else aa_path.stem
        mine = [s for s in segments if d_span[0] <= s[2][0] and s[2][1] <= d_span[1]]
        index_of = {s[0]: i for i, s in enumerate(mine)}
        units, turn_rank = [], {}
        for i, (sid, stype, span, feats) in enumerate(mine):
            turn = covering(span, turns)
            tkey = turn[0] if turn else f"seg:{sid}"
            turn_rank.setdefault(tkey, len(turn_rank))
            emitter = (turn[3].get("Emitter") if turn else None) or feats.get("Emitter") or "unknown"
            nonplayer = stype.lower() in EEU_UNIT_TYPES or emitter.lower() in NONPLAYER_EMITTERS
            seg_text = text[span[0]:span[1]] if text and span[0] >= 0 else ""
            seg_text = " ".join(seg_text.split()) or f"<{sid}>"
            units.append(ElementaryUnit(i, UnitKind.EEU if nonplayer else UnitKind.EDU, emitter, seg_text, turn_rank[tkey]))
        # turn ranks follow document order of segments, so they never decrease
        cdu_schemas = {sid for sid, (stype, _) in schemas.items() if stype.lower() in CDU_SCHEMA_TYPES}
        cdu_map: dict[str, CDU] = {}
        for sch_id in sorted(cdu_schemas):
            members = schemas[sch_id][1]
            resolved = [index_of[m] if m in index_of else (m if m in cdu_schemas else None) for m in members]
            if resolved and None not in resolved:
                cdu_map[sch_id] = CDU(sch_id, tuple(resolved))  # type: ignore[arg-type]
        # drop CDUs nesting a CDU that was dropped (e.g. one spanning another dialogue)
        cdus = _closed_cdus(cdu_map)
        raw = []
        for rid, label, terms in relations:
            if len(terms) != 2:
                continue
            ends = [index_of.get(t, t if t in cdus else None) for t in terms]
            if all(e is None for e in ends):
                continue  # belongs to another dialogue
            record = {"id": rid, "type": label, "terms": terms}
            raw.append((label, ends[0] if ends[0] is not None else -1, ends[1] if ends[1] is not None else -1, record))
        rels = _adapt_relations(did, raw, taxonomy, len(units), set(cdus), discards)
        if units:
            out.append(RawDialogue(did, tuple(units), rels, tuple(cdus.values())))
    return out


def _closed_cdus(cdu_map: dict[str, CDU]) -> dict[str, CDU]:
    keep = dict(cdu_map)
    changed = True
    while changed:
        changed = False
        for cid, cdu in list(keep.items()):
            if any(isinstance(m, str) and m not in keep for m in cdu.members):
                del keep[cid]
                changed = True
    return keep


def load_stac_glozz(path: str | os.PathLike, taxonomy: Taxonomy, name: str | None = None, split: Split = Split.TEST) -> Corpus:
    """Read glozz ``.aa`` annotation files (a single file or a directory tree).

    ``Segment`` units become EDUs, or EEUs when their enclosing ``Turn`` is
    emitted by the game server/UI. ``Dialogue`` units split a file into
    dialogues; ``Complex_discourse_unit`` schemas become CDUs.
    """
    p = Path(path)
    files = sorted(p.rglob("*.aa")) if p.is_dir() else [p]
    if not files:
        raise CorpusFormatError(f"no .aa files under {path}")
    discards = _DiscardLog()
    dialogues = []
    for f in files:
        dialogues.extend(_glozz_file(f, taxonomy, discards))
    return Corpus(name or p.stem, split, tuple(dialogues), taxonomy, tuple(discards.items))


class Format(str, Enum):
    CANONICAL = "canonical"
    STAC_GLOZZ = "stac_glozz"
    MSDC = "msdc"
    MOLWENI = "molweni"


DEFAULT_TAXONOMY = {Format.STAC_GLOZZ: "stac", Format.MSDC: "msdc", Format.MOLWENI: "molweni"}


def load_corpus(
    path: str | os.PathLike,
    fmt: Format | str = Format.CANONICAL,
    *,
    taxonomy: Taxonomy | None = None,
    name: str | None = None,
    split: Split | str = Split.TEST,
) -> Corpus:
    """Load a corpus in any supported format.

    ``molweni`` reads the canonical format under the Molweni taxonomy; the
    conversion from the upstream Molweni distribution happens offline.
    """
    fmt = Format(fmt)
    split = Split(split)
    if not Path(path).exists():
        raise CorpusFormatError(f"no such file: {path}")
    if fmt is Format.CANONICAL:
        return load_canonical(path, taxonomy)
    if fmt is Format.MOLWENI:
        return load_canonical(path, taxonomy or get_taxonomy("molweni"))
    tax = taxonomy or get_taxonomy(DEFAULT_TAXONOMY[fmt])
    if fmt is Format.MSDC:
        return load_msdc(path, tax, name, split)
    return load_stac_glozz(path, tax, name, split)


# ---------------------------------------------------------------------------
# statistics


@dataclass(frozen=True)
class CorpusStats:
    edu_count: int = 0
    eeu_count: int = 0
    mpdu_count: int = 0
    mpdu3_count: int = 0
    mpdu_gt3_count: int = 0

    def __add__(self, other: CorpusStats) -> CorpusStats:
        return CorpusStats(*(a + b for a, b in zip(self.as_tuple(), other.as_tuple())))

    def as_tuple(self) -> tuple[int, int, int, int, int]:
        return (self.edu_count, self.eeu_count, self.mpdu_count, self.mpdu3_count, self.mpdu_gt3_count)


def dialogue_stats(d: RawDialogue) -> CorpusStats:
    if d.has_cdu_refs:
        raise ValueError(f"dialogue {d.dialogue_id} still contains CDUs; preprocess first")
    m = mpdu_set(d.graph())
    edus = sum(1 for u in d.units if u.kind is UnitKind.EDU)
    return CorpusStats(edus, len(d.units) - edus, len(m), m.exactly3, m.more_than3)


def corpus_stats(corpus: Corpus) -> CorpusStats:
    total = CorpusStats()
    for d in corpus.dialogues:
        total = total + dialogue_stats(d)
    return total
