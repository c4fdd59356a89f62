"""Context-structure perturbations and the Narration second pass."""

from __future__ import annotations

import random
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Sequence

from .backend import step_seed
from .corpus_io import RawDialogue
from .engine import Sample
from .graph import MSDC_TAXONOMY, DiscourseGraph, RelationInstance, Taxonomy, UnitKind

QUESTION_LABELS = frozenset({"CLARIFQ", "CONFQ", "QELAB"})
SECOND_PASS_TAG = "second_pass"


class AblationError(ValueError):
    pass


def perturb_random(sample: Sample, seed: int, taxonomy: Taxonomy = MSDC_TAXONOMY) -> Sample:
    """Replace every context relation by one with a uniform label and uniform endpoints.

    Endpoints ``i < j`` are drawn among the window units before the current
    turn, the only span legitimate context structure can occupy.
    """
    if not sample.context:
        return sample
    rng = random.Random(step_seed(seed, sample.dialogue_id, sample.step))
    pool = range(sample.window_start, sample.turn_start)
    codes = taxonomy.codes
    out = []
    for _ in sample.context:
        i, j = sorted(rng.sample(pool, 2))
        out.append(RelationInstance(i, j, rng.choice(codes)))
    return sample.with_context(out)


def strip_structure(sample: Sample) -> Sample:
    return sample if not sample.context else sample.with_context(())


def random_transform(seed: int, taxonomy: Taxonomy = MSDC_TAXONOMY) -> Callable[[Sample], Sample]:
    return lambda s: perturb_random(s, seed, taxonomy)


# ---------------------------------------------------------------------------
# targeted edits

StepKey = tuple[str, int]


def _step_key(sample: Sample) -> StepKey:
    return (sample.dialogue_id, sample.step)


def _correct_for(
    sample: Sample, predictions: Mapping[StepKey, Iterable[RelationInstance]], gold: Mapping[str, DiscourseGraph]
) -> tuple[set[RelationInstance], DiscourseGraph]:
    key = _step_key(sample)
    if key not in predictions:
        raise AblationError(f"no predictions for dialogue {key[0]} step {key[1]}")
    if sample.dialogue_id not in gold:
        raise AblationError(f"no gold graph for dialogue {sample.dialogue_id}")
    g = gold[sample.dialogue_id]
    return {r for r in predictions[key] if r in g}, g


def ablate_qap(
    samples: Sequence[Sample],
    predictions: Mapping[StepKey, Iterable[RelationInstance]],
    gold: Mapping[str, DiscourseGraph],
) -> list[Sample]:
    """Samples with a correctly predicted QAP, stripped of question relations in context.

    ``predictions`` holds the relations accepted at each (dialogue, step);
    correctness is judged against ``gold``.
    """
    out = []
    for s in samples:
        correct, _ = _correct_for(s, predictions, gold)
        if any(r.label == "QAP" for r in correct):
            out.append(s.with_context(r for r in s.context if r.label not in QUESTION_LABELS))
    return out


@dataclass(frozen=True)
class Triangle:
    x: int
    y: int
    z: int


def correction_triangles(
    context: Iterable[RelationInstance], correct: Iterable[RelationInstance], gold: DiscourseGraph
) -> list[Triangle]:
    """Triangles CORR(x,y) in context, RES(y,z) in gold, CORR(x,z) correctly predicted."""
    ctx_corr = [r for r in context if r.label == "CORR"]
    found = []
    for c in correct:
        if c.label != "CORR":
            continue
        x, z = c.source, c.target
        for r in ctx_corr:
            if r.source == x and RelationInstance(r.target, z, "RES") in gold:
                found.append(Triangle(x, r.target, z))
    return sorted(found, key=lambda t: (t.x, t.y, t.z))


def ablate_correction_triangle(
    samples: Sequence[Sample],
    predictions: Mapping[StepKey, Iterable[RelationInstance]],
    gold: Mapping[str, DiscourseGraph],
) -> list[Sample]:
    """Relabel the first Correction of one correction triangle per selected sample to ACK.

    When several triangles qualify, the one with the latest ``y`` (ties: latest
    ``z``, then ``x``) is edited, so exactly one label changes per sample.
    """
    out = []
    for s in samples:
        correct, g = _correct_for(s, predictions, gold)
        triangles = correction_triangles(s.context, correct, g)
        if not triangles:
            continue
        t = max(triangles, key=lambda t: (t.y, t.z, t.x))
        target = RelationInstance(t.x, t.y, "CORR")
        ctx = [RelationInstance(r.source, r.target, "ACK") if r == target else r for r in s.context]
        out.append(s.with_context(ctx))
    return out


# ---------------------------------------------------------------------------


def instruction_heads(graph: DiscourseGraph, dialogue: RawDialogue) -> list[int]:
    """EDUs with an outgoing Result to an EEU, in dialogue order."""
    kinds = {u.index: u.kind for u in dialogue.units}
    return sorted(
        {
            r.source
            for r in graph.relations
            if r.label == "RES" and kinds.get(r.source) is UnitKind.EDU and kinds.get(r.target) is UnitKind.EEU
        }
    )


HeadFinder = Callable[[DiscourseGraph, RawDialogue], list[int]]


def second_pass_narration(
    predicted: DiscourseGraph, dialogue: RawDialogue, heads: HeadFinder = instruction_heads
) -> DiscourseGraph:
    """Link consecutive instruction heads with Narration.

    ``NARR(a, b)`` is added for consecutive heads ``a < b`` unless ``b``
    already has an incoming Narration. Nothing is removed; additions are
    tagged ``second_pass`` in the graph provenance.
    """
    chain = heads(predicted, dialogue)
    has_narr = {r.target for r in predicted.relations if r.label == "NARR"}
    added = [RelationInstance(a, b, "NARR") for a, b in zip(chain, chain[1:]) if b not in has_narr]
    added = [r for r in added if r not in predicted]
    if not added:
        return predicted
    out = DiscourseGraph.build(predicted.dialogue_id, predicted.unit_count, predicted.relations + tuple(added))
    out.provenance.update(predicted.provenance)
    out.provenance.update({r: SECOND_PASS_TAG for r in added})
    return out
