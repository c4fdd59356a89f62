"""CDU flattening, EEU-run compression and isolated-EEU pruning.

Every stage is a pure function of one dialogue and returns a
:class:`StageResult` carrying the new dialogue, an old->new unit index
remap (``None`` for removed units) and the annotations it discarded.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, Iterable, Sequence

from .corpus_io import CDU, Corpus, Discard, Endpoint, RawDialogue, RawRelation
from .graph import ElementaryUnit, UnitKind

Remap = dict[int, "int | None"]

MERGED_TEXT_SEP = "; "


class PreprocessError(ValueError):
    pass


@dataclass(frozen=True)
class StageResult:
    dialogue: RawDialogue
    remap: Remap
    discards: tuple[Discard, ...] = ()


def identity_remap(n: int) -> Remap:
    return {i: i for i in range(n)}


def compose(first: Remap, second: Remap) -> Remap:
    """Remap equivalent to applying ``first`` then ``second``."""
    return {old: (None if mid is None else second[mid]) for old, mid in first.items()}


def _rewire(
    dialogue: RawDialogue,
    rels: Iterable[RawRelation],
    mapper: Callable[[Endpoint], "int | None"],
    *,
    dropped_reason: str,
    collapsed_reason: str,
) -> tuple[list[RawRelation], list[Discard]]:
    out: list[RawRelation] = []
    seen: set[RawRelation] = set()
    discards: list[Discard] = []
    did = dialogue.dialogue_id
    for rel in rels:
        src, tgt = mapper(rel.src), mapper(rel.tgt)
        if src is None or tgt is None:
            discards.append(Discard(did, dropped_reason, str_raw(rel)))
            continue
        if src == tgt:
            discards.append(Discard(did, collapsed_reason, str_raw(rel)))
            continue
        if src > tgt:
            discards.append(Discard(did, "backward_after_rewire", str_raw(rel)))
            continue
        new = RawRelation(rel.label, src, tgt)
        if new in seen:
            discards.append(Discard(did, "duplicate_after_rewire", str_raw(rel)))
            continue
        seen.add(new)
        out.append(new)
    return out, discards


def str_raw(rel: RawRelation) -> str:
    return f"{rel.label}({rel.src},{rel.tgt})"


# ---------------------------------------------------------------------------


def cdu_heads(dialogue: RawDialogue) -> dict[str, int]:
    """Head unit of every CDU: the lowest-index unit among its recursive members."""
    cdus: dict[str, CDU] = {}
    for c in dialogue.cdus:
        if c.cdu_id in cdus:
            raise PreprocessError(f"duplicate CDU id {c.cdu_id} in {dialogue.dialogue_id}")
        cdus[c.cdu_id] = c
    n = len(dialogue.units)
    heads: dict[str, int] = {}

    def resolve(cid: str, stack: tuple[str, ...]) -> int:
        if cid in heads:
            return heads[cid]
        if cid in stack:
            raise PreprocessError(f"cyclic CDU membership via {cid} in {dialogue.dialogue_id}")
        cdu = cdus.get(cid)
        if cdu is None:
            raise PreprocessError(f"dangling CDU reference {cid!r} in {dialogue.dialogue_id}")
        if not cdu.members:
            raise PreprocessError(f"CDU {cid} has no members in {dialogue.dialogue_id}")
        best = None
        for m in cdu.members:
            if isinstance(m, int):
                if not 0 <= m < n:
                    raise PreprocessError(f"CDU {cid} names missing unit {m} in {dialogue.dialogue_id}")
                h = m
            else:
                h = resolve(m, stack + (cid,))
            best = h if best is None else min(best, h)
        heads[cid] = best  # type: ignore[assignment]
        return heads[cid]

    for cid in cdus:
        resolve(cid, ())
    return heads


def flatten_cdus(dialogue: RawDialogue) -> StageResult:
    """Replace every CDU endpoint by the CDU's head unit and drop the CDUs."""
    n = len(dialogue.units)
    if not dialogue.has_cdu_refs:
        return StageResult(dialogue, identity_remap(n))
    heads = cdu_heads(dialogue)

    def mapper(end: Endpoint) -> int:
        if isinstance(end, int):
            return end
        if end not in heads:
            raise PreprocessError(f"dangling CDU reference {end!r} in {dialogue.dialogue_id}")
        return heads[end]

    rels, discards = _rewire(
        dialogue, dialogue.relations, mapper, dropped_reason="dangling", collapsed_reason="self_loop_after_flatten"
    )
    return StageResult(replace(dialogue, relations=tuple(rels), cdus=()), identity_remap(n), tuple(discards))


def _require_flat(dialogue: RawDialogue, stage: str) -> None:
    if dialogue.has_cdu_refs:
        raise PreprocessError(f"{stage}: flatten CDUs of {dialogue.dialogue_id} first")


def eeu_runs(units: Sequence[ElementaryUnit]) -> list[list[int]]:
    """Maximal groups of consecutive units; only same-agent, same-turn EEUs share a group."""
    groups: list[list[int]] = []
    for u in units:
        if groups and u.kind is UnitKind.EEU:
            prev = units[groups[-1][-1]]
            if prev.kind is UnitKind.EEU and prev.speaker == u.speaker and prev.turn_id == u.turn_id:
                groups[-1].append(u.index)
                continue
        groups.append([u.index])
    return groups


def compress_eeu_sequences(dialogue: RawDialogue) -> StageResult:
    """Collapse each run of EEUs by one agent within one turn into a single EEU."""
    _require_flat(dialogue, "compress_eeu_sequences")
    groups = eeu_runs(dialogue.units)
    if len(groups) == len(dialogue.units):
        return StageResult(dialogue, identity_remap(len(dialogue.units)))
    remap: Remap = {}
    units = []
    for new_idx, members in enumerate(groups):
        first = dialogue.units[members[0]]
        text = MERGED_TEXT_SEP.join(dialogue.units[m].text for m in members)
        units.append(ElementaryUnit(new_idx, first.kind, first.speaker, text, first.turn_id))
        for m in members:
            remap[m] = new_idx
    rels, discards = _rewire(
        dialogue, dialogue.relations, lambda e: remap[e], dropped_reason="dangling", collapsed_reason="internal_to_run"  # type: ignore[index]
    )
    return StageResult(replace(dialogue, units=tuple(units), relations=tuple(rels)), remap, tuple(discards))


def reaches_edu(dialogue: RawDialogue) -> set[int]:
    """Units connected (ignoring direction) to at least one EDU, EDUs included."""
    adj: dict[int, list[int]] = {u.index: [] for u in dialogue.units}
    for r in dialogue.relations:
        adj[r.src].append(r.tgt)  # type: ignore[index]
        adj[r.tgt].append(r.src)  # type: ignore[index]
    seen = {u.index for u in dialogue.units if u.kind is UnitKind.EDU}
    queue = deque(seen)
    while queue:
        v = queue.popleft()
        for w in adj[v]:
            if w not in seen:
                seen.add(w)
                queue.append(w)
    return seen


def prune_isolated_eeus(dialogue: RawDialogue) -> StageResult:
    """Remove EEUs with no undirected relation path to any EDU."""
    _require_flat(dialogue, "prune_isolated_eeus")
    keep = reaches_edu(dialogue)
    if len(keep) == len(dialogue.units):
        return StageResult(dialogue, identity_remap(len(dialogue.units)))
    remap: Remap = {}
    units = []
    for u in dialogue.units:
        if u.index in keep:
            remap[u.index] = len(units)
            units.append(replace(u, index=len(units)))
        else:
            remap[u.index] = None
    rels, discards = _rewire(
        dialogue, dialogue.relations, lambda e: remap[e], dropped_reason="pruned_eeu", collapsed_reason="self_loop"  # type: ignore[index]
    )
    return StageResult(replace(dialogue, units=tuple(units), relations=tuple(rels)), remap, tuple(discards))


class Profile(str, Enum):
    MSDC = "msdc"
    STAC_SIT = "stac_sit"
    STAC_L = "stac_l"
    MOLWENI = "molweni"


Stage = Callable[[RawDialogue], StageResult]

STAGES: dict[str, Stage] = {
    "flatten": flatten_cdus,
    "compress": compress_eeu_sequences,
    "prune": prune_isolated_eeus,
}

PROFILE_STAGES: dict[Profile, tuple[str, ...]] = {
    Profile.MSDC: ("flatten", "compress"),
    Profile.STAC_SIT: ("flatten", "compress", "prune"),
    Profile.STAC_L: ("flatten",),
    Profile.MOLWENI: ("flatten",),
}


@dataclass
class DialogueTrace:
    """Per-stage remaps for one dialogue, plus their composition."""

    stage_remaps: list[tuple[str, Remap]] = field(default_factory=list)
    remap: Remap = field(default_factory=dict)


@dataclass
class PipelineResult:
    corpus: Corpus
    traces: dict[str, DialogueTrace]
    discards: tuple[Discard, ...]


def preprocess_dialogue(dialogue: RawDialogue, stages: Sequence[str]) -> tuple[RawDialogue, DialogueTrace, list[Discard]]:
    trace = DialogueTrace(remap=identity_remap(len(dialogue.units)))
    discards: list[Discard] = []
    for name in stages:
        res = STAGES[name](dialogue)
        trace.stage_remaps.append((name, res.remap))
        trace.remap = compose(trace.remap, res.remap)
        discards.extend(res.discards)
        dialogue = res.dialogue
    return dialogue, trace, discards


def preprocess_pipeline(corpus: Corpus, profile: Profile | str, stages: Sequence[str] | None = None) -> PipelineResult:
    """Apply the profile's stages to every dialogue.

    ``stages`` overrides the profile's stage order (e.g. prune before compress).
    """
    profile = Profile(profile)
    order = tuple(stages) if stages is not None else PROFILE_STAGES[profile]
    unknown = [s for s in order if s not in STAGES]
    if unknown:
        raise PreprocessError(f"unknown stages {unknown}")
    dialogues, traces, discards = [], {}, list(corpus.discards)
    for d in corpus.dialogues:
        out, trace, dropped = preprocess_dialogue(d, order)
        dialogues.append(out)
        traces[d.dialogue_id] = trace
        discards.extend(dropped)
    new = replace(corpus, dialogues=tuple(dialogues), discards=tuple(discards))
    return PipelineResult(new, traces, tuple(discards))
