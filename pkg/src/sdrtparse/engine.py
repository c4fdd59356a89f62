"""Incremental parsing driver: windowed samples per turn, prompts, accumulation."""

from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum
from importlib import resources
from typing import Callable, Iterable, Mapping, Sequence

from .backend import Backend, BackendError, GenerationRequest, ParsedOutput, RejectReason, parse_output
from .corpus_io import Corpus, RawDialogue, dumps_line
from .graph import (
    MSDC_TAXONOMY,
    DiscourseGraph,
    ElementaryUnit,
    RelationInstance,
    Taxonomy,
    UnitKind,
    add_relation,
    format_relations,
    get_taxonomy,
    parse_relations,
)

log = logging.getLogger(__name__)

DEFAULT_WINDOW = 15
TEMPLATE_VERSION = "v1"


class Mode(str, Enum):
    GOLD = "gold"
    PREDICTED = "predicted"


@dataclass(frozen=True)
class EngineConfig:
    window_size: int = DEFAULT_WINDOW
    mode: Mode = Mode.PREDICTED
    taxonomy: Taxonomy = MSDC_TAXONOMY
    max_new_tokens: int = 256
    temperature: float = 0.0
    stop_sequences: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if self.window_size < 1:
            raise ValueError("window_size must be positive")
        object.__setattr__(self, "mode", Mode(self.mode))


@dataclass(frozen=True)
class Sample:
    """One increment: the visible units, their structure, and the units to attach."""

    dialogue_id: str
    step: int
    window_units: tuple[ElementaryUnit, ...]
    context: tuple[RelationInstance, ...]
    current_turn: tuple[int, ...]
    mode: Mode = Mode.PREDICTED

    @property
    def window_start(self) -> int:
        return self.window_units[0].index

    @property
    def window_end(self) -> int:
        return self.window_units[-1].index

    @property
    def turn_start(self) -> int:
        return self.current_turn[0]

    def with_context(self, context: Iterable[RelationInstance]) -> Sample:
        return replace(self, context=tuple(context))

    def to_dict(self) -> dict:
        return {
            "id": self.dialogue_id,
            "step": self.step,
            "mode": self.mode.value,
            "units": [
                {"idx": u.index, "kind": u.kind.value, "speaker": u.speaker, "text": u.text, "turn": u.turn_id}
                for u in self.window_units
            ],
            "context": format_relations(self.context),
            "turn_units": list(self.current_turn),
        }

    @classmethod
    def from_dict(cls, rec: Mapping) -> Sample:
        units = tuple(
            ElementaryUnit(u["idx"], UnitKind(u["kind"]), u["speaker"], u["text"], u["turn"]) for u in rec["units"]
        )
        return cls(
            rec["id"], rec["step"], units, tuple(parse_relations(rec["context"])), tuple(rec["turn_units"]), Mode(rec["mode"])
        )


def dialogue_steps(dialogue: RawDialogue, window_size: int) -> list[tuple[int, tuple[int, ...]]]:
    """``(turn_id, unit indices)`` per step.

    A turn with more than ``window_size + 1`` units is split into consecutive
    chunks of at most that many units so that every unit is visible when it
    is attached.
    """
    steps = []
    cap = window_size + 1
    for units in dialogue.turns():
        turn_id = dialogue.units[units[0]].turn_id
        for s in range(0, len(units), cap):
            steps.append((turn_id, tuple(units[s : s + cap])))
    return steps


def sample_for_units(
    dialogue: RawDialogue,
    step_units: Sequence[int],
    structure: DiscourseGraph | Iterable[RelationInstance],
    cfg: EngineConfig,
    step: int = 0,
) -> Sample:
    if not step_units:
        raise ValueError(f"empty step in dialogue {dialogue.dialogue_id}")
    first, last = step_units[0], step_units[-1]
    if not 0 <= first <= last < len(dialogue.units):
        raise ValueError(f"step units {first}..{last} outside dialogue {dialogue.dialogue_id}")
    lo = max(0, last - cfg.window_size)
    if first < lo:
        raise ValueError(f"step spans more than the window in dialogue {dialogue.dialogue_id}")
    context = tuple(sorted(r for r in structure if r.source >= lo and r.target < first))
    return Sample(dialogue.dialogue_id, step, dialogue.units[lo : last + 1], context, tuple(step_units), cfg.mode)


def build_sample(
    dialogue: RawDialogue,
    turn_id: int,
    accumulated: DiscourseGraph | None,
    gold: DiscourseGraph | None,
    cfg: EngineConfig,
    part: int = 0,
) -> Sample:
    """Sample for ``turn_id`` (its ``part``-th chunk if the turn is longer than the window).

    The window runs from ``max(0, m - k)`` to the turn's last unit ``m``;
    the context keeps relations of the gold or accumulated graph with both
    endpoints in the window and the target before the current turn.
    """
    steps = dialogue_steps(dialogue, cfg.window_size)
    matching = [(i, units) for i, (t, units) in enumerate(steps) if t == turn_id]
    if not matching:
        raise ValueError(f"turn {turn_id} not in dialogue {dialogue.dialogue_id}")
    if not 0 <= part < len(matching):
        raise ValueError(f"turn {turn_id} has {len(matching)} parts")
    step, units = matching[part]
    structure = gold if cfg.mode is Mode.GOLD else accumulated
    if structure is None:
        raise ValueError(f"{cfg.mode.value} mode needs a {'gold' if cfg.mode is Mode.GOLD else 'accumulated'} graph")
    return sample_for_units(dialogue, units, structure, cfg, step)


def _one_line(text: str) -> str:
    return " ".join(text.split())


_TEMPLATE: str | None = None


def prompt_template() -> str:
    global _TEMPLATE
    if _TEMPLATE is None:
        _TEMPLATE = resources.files("sdrtparse").joinpath(f"templates/prompt_{TEMPLATE_VERSION}.txt").read_text("utf-8")
    return _TEMPLATE


def serialize_sample(sample: Sample) -> str:
    units = "\n".join(
        f"{u.index} [{u.kind.value}] {_one_line(u.speaker)}: {_one_line(u.text)}" for u in sample.window_units
    )
    tokens = format_relations(sample.context)
    structure = "Structure:" + (f" {tokens}" if tokens else "")
    new = "New: " + " ".join(str(i) for i in sample.current_turn)
    return prompt_template().format(units=units, structure=structure, new=new)


# ---------------------------------------------------------------------------


@dataclass
class StepRecord:
    sample: Sample
    turn_id: int
    raw: str = ""
    accepted: list[RelationInstance] = field(default_factory=list)
    rejected: list[tuple[str, RejectReason]] = field(default_factory=list)
    error: str | None = None

    def to_dict(self) -> dict:
        rec = self.sample.to_dict()
        rec.update(
            turn=self.turn_id,
            window=[self.sample.window_start, self.sample.window_end],
            raw=self.raw,
            accepted=format_relations(self.accepted),
            rejected=[[tok, reason.value] for tok, reason in self.rejected],
        )
        if self.error is not None:
            rec["error"] = self.error
        return rec

    @classmethod
    def from_dict(cls, rec: Mapping) -> StepRecord:
        return cls(
            Sample.from_dict(rec),
            rec.get("turn", -1),
            rec.get("raw", ""),
            parse_relations(rec.get("accepted", "")),
            [(tok, RejectReason(reason)) for tok, reason in rec.get("rejected", [])],
            rec.get("error"),
        )


@dataclass
class StepLog:
    dialogue_id: str
    steps: list[StepRecord] = field(default_factory=list)
    aborted: str | None = None


class DialogueAborted(BackendError):
    def __init__(self, message: str, graph: DiscourseGraph, steplog: StepLog):
        super().__init__(message)
        self.graph = graph
        self.steplog = steplog


ContextTransform = Callable[[Sample], Sample]


def predict_sample(sample: Sample, backend: Backend, cfg: EngineConfig) -> tuple[str, ParsedOutput]:
    request = GenerationRequest(
        serialize_sample(sample),
        max_new_tokens=cfg.max_new_tokens,
        temperature=cfg.temperature,
        stop_sequences=cfg.stop_sequences,
        dialogue_id=sample.dialogue_id,
        step_units=sample.current_turn,
    )
    raw = backend.generate(request)
    return raw, parse_output(raw, sample, cfg.taxonomy)


def run_dialogue(
    dialogue: RawDialogue,
    gold: DiscourseGraph | None,
    backend: Backend,
    cfg: EngineConfig,
    transform: ContextTransform | None = None,
) -> tuple[DiscourseGraph, StepLog]:
    """Parse one dialogue step by step.

    ``transform`` edits each sample's context before generation (structure
    ablations). Raises :class:`DialogueAborted`, carrying the partial graph
    and log, when the backend gives up.
    """
    if cfg.mode is Mode.GOLD and gold is None:
        raise ValueError("gold mode needs the gold graph")
    accumulated = DiscourseGraph(dialogue.dialogue_id, len(dialogue.units))
    steplog = StepLog(dialogue.dialogue_id)
    structure_for = (lambda: gold) if cfg.mode is Mode.GOLD else (lambda: accumulated)
    for step, (turn_id, units) in enumerate(dialogue_steps(dialogue, cfg.window_size)):
        sample = sample_for_units(dialogue, units, structure_for(), cfg, step)  # type: ignore[arg-type]
        if transform is not None:
            sample = transform(sample)
        record = StepRecord(sample, turn_id)
        steplog.steps.append(record)
        try:
            record.raw, parsed = predict_sample(sample, backend, cfg)
        except BackendError as exc:
            record.error = str(exc)
            steplog.aborted = f"step {step}: {exc}"
            raise DialogueAborted(steplog.aborted, accumulated, steplog) from exc
        record.rejected = parsed.rejected
        for rel in parsed.accepted:
            accumulated, _ = add_relation(accumulated, rel)
            record.accepted.append(rel)
    return accumulated, steplog


@dataclass
class CorpusRun:
    results: dict[str, tuple[DiscourseGraph, StepLog]]
    failures: dict[str, str]

    @property
    def graphs(self) -> dict[str, DiscourseGraph]:
        return {did: g for did, (g, _) in self.results.items()}


def run_corpus(
    corpus: Corpus,
    backend: Backend,
    cfg: EngineConfig,
    parallelism: int = 1,
    transform: ContextTransform | None = None,
) -> CorpusRun:
    """Run every dialogue; aborted dialogues keep their partial graph and are listed in ``failures``.

    Results are keyed in corpus order and do not depend on ``parallelism``.
    """
    gold = {}
    if cfg.mode is Mode.GOLD:
        gold = corpus.gold_graphs()

    def job(d: RawDialogue) -> tuple[DiscourseGraph, StepLog, str | None]:
        try:
            g, steplog = run_dialogue(d, gold.get(d.dialogue_id), backend, cfg, transform)
            return g, steplog, None
        except DialogueAborted as exc:
            log.error("dialogue %s aborted: %s", d.dialogue_id, exc)
            return exc.graph, exc.steplog, str(exc)

    if parallelism <= 1:
        outcomes = [job(d) for d in corpus.dialogues]
    else:
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            outcomes = list(pool.map(job, corpus.dialogues))
    results, failures = {}, {}
    for d, (g, steplog, err) in zip(corpus.dialogues, outcomes):
        results[d.dialogue_id] = (g, steplog)
        if err is not None:
            failures[d.dialogue_id] = err
    return CorpusRun(results, failures)


# ---------------------------------------------------------------------------
# files


def write_predictions(graphs: Mapping[str, DiscourseGraph], path: str | os.PathLike, taxonomy: Taxonomy | None = None) -> None:
    """One line per dialogue: ``{"id", "unit_count", "relations": "CODE(i,j) ..."}``.

    Relations tagged in ``provenance`` are also listed under their tag.
    """
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        header = {"format": "sdrt-predictions", "version": 1}
        if taxonomy is not None:
            header["taxonomy"] = taxonomy.taxonomy_id
        f.write(dumps_line(header) + "\n")
        for did, g in graphs.items():
            rec: dict = {"id": did, "unit_count": g.unit_count, "relations": format_relations(g.relations)}
            tags: dict[str, list[RelationInstance]] = {}
            for rel, tag in g.provenance.items():
                tags.setdefault(tag, []).append(rel)
            for tag in sorted(tags):
                rec[tag] = format_relations(tags[tag])
            f.write(dumps_line(rec) + "\n")


def load_predictions(path: str | os.PathLike) -> dict[str, DiscourseGraph]:
    graphs: dict[str, DiscourseGraph] = {}
    with open(path, encoding="utf-8") as f:
        lines = [ln for ln in f.read().split("\n") if ln.strip()]
    if not lines or json.loads(lines[0]).get("format") != "sdrt-predictions":
        raise ValueError(f"{path}: not a predictions file")
    for line in lines[1:]:
        rec = json.loads(line)
        g = DiscourseGraph.build(rec["id"], rec["unit_count"], parse_relations(rec["relations"]))
        for key, value in rec.items():
            if key not in ("id", "unit_count", "relations"):
                for rel in parse_relations(value):
                    g.provenance[rel] = key
        graphs[rec["id"]] = g
    return graphs


def write_steplog(logs: Iterable[StepLog], path: str | os.PathLike) -> None:
    """One line per step, each carrying the full sample (usable as ablation input)."""
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for steplog in logs:
            for rec in steplog.steps:
                f.write(dumps_line(rec.to_dict()) + "\n")


def load_steplog(path: str | os.PathLike) -> list[StepRecord]:
    with open(path, encoding="utf-8") as f:
        return [StepRecord.from_dict(json.loads(ln)) for ln in f if ln.strip()]


def taxonomy_from(name: str | None) -> Taxonomy:
    return get_taxonomy(name) if name else MSDC_TAXONOMY
