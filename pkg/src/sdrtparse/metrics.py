"""Link and link+relation scoring of predicted graphs against gold.

Counts are pooled over all dialogues before any ratio is taken (micro
averaging). Link+relation F1 is the gold-support weighted average of the
per-type F1 scores; the plain micro-averaged variant is reported alongside.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Mapping

from .graph import DiscourseGraph, RelationInstance, distance

POOLING_NOTE = "counts pooled corpus-wide (micro) before per-type weighting"


class MetricsError(ValueError):
    pass


@dataclass(frozen=True)
class PRF:
    precision: float
    recall: float
    f1: float
    tp: int = 0
    fp: int = 0
    fn: int = 0

    @property
    def support(self) -> int:
        return self.tp + self.fn

    @classmethod
    def from_counts(cls, tp: int, fp: int, fn: int) -> PRF:
        p = tp / (tp + fp) if tp + fp else 0.0
        r = tp / (tp + fn) if tp + fn else 0.0
        return cls(p, r, f1_score(p, r), tp, fp, fn)


def f1_score(p: float, r: float) -> float:
    return 2 * p * r / (p + r) if p + r else 0.0


Graphs = Mapping[str, DiscourseGraph]


def _check_same_dialogues(gold: Graphs, pred: Graphs) -> None:
    if set(gold) != set(pred):
        missing = sorted(set(gold) - set(pred))[:5]
        extra = sorted(set(pred) - set(gold))[:5]
        raise MetricsError(f"dialogue sets differ: missing from pred {missing}, not in gold {extra}")


def _keep(rel: RelationInstance, cutoff: float | None) -> bool:
    return cutoff is None or distance(rel) <= cutoff


def _filtered(graphs: Graphs, cutoff: float | None) -> dict[str, set[RelationInstance]]:
    return {did: {r for r in g.relations if _keep(r, cutoff)} for did, g in graphs.items()}


def link_f1(gold: Graphs, pred: Graphs, cutoff: float | None = None) -> PRF:
    """Unlabelled attachment scores; each (dialogue, i, j) pair counts once."""
    _check_same_dialogues(gold, pred)
    g, p = _filtered(gold, cutoff), _filtered(pred, cutoff)
    tp = fp = fn = 0
    for did in gold:
        gp = {r.pair for r in g[did]}
        pp = {r.pair for r in p[did]}
        tp += len(gp & pp)
        fp += len(pp - gp)
        fn += len(gp - pp)
    return PRF.from_counts(tp, fp, fn)


@dataclass(frozen=True)
class TypeScore:
    tp: int
    fp: int
    fn: int
    precision: float
    recall: float
    f1: float

    @property
    def gold_support(self) -> int:
        return self.tp + self.fn


@dataclass(frozen=True)
class LinkRelScore:
    precision: float  # support-weighted
    recall: float  # support-weighted (equals micro recall)
    f1: float  # support-weighted
    per_type: dict[str, TypeScore]
    micro: PRF


def _type_counts(gold: Graphs, pred: Graphs, cutoff: float | None) -> dict[str, list[int]]:
    g, p = _filtered(gold, cutoff), _filtered(pred, cutoff)
    counts: dict[str, list[int]] = {}
    for did in gold:
        for rel in g[did] | p[did]:
            c = counts.setdefault(rel.label, [0, 0, 0])
            if rel in g[did] and rel in p[did]:
                c[0] += 1
            elif rel in p[did]:
                c[1] += 1
            else:
                c[2] += 1
    return counts


def link_rel_f1(gold: Graphs, pred: Graphs, cutoff: float | None = None) -> LinkRelScore:
    """Labelled scores: a true positive needs the pair and the label to match."""
    _check_same_dialogues(gold, pred)
    per_type = {}
    for label, (tp, fp, fn) in sorted(_type_counts(gold, pred, cutoff).items()):
        s = PRF.from_counts(tp, fp, fn)
        per_type[label] = TypeScore(tp, fp, fn, s.precision, s.recall, s.f1)
    total = sum(t.gold_support for t in per_type.values())

    def weighted(attr: str) -> float:
        if not total:
            return 0.0
        return sum(t.gold_support * getattr(t, attr) for t in per_type.values()) / total

    micro = PRF.from_counts(
        sum(t.tp for t in per_type.values()), sum(t.fp for t in per_type.values()), sum(t.fn for t in per_type.values())
    )
    return LinkRelScore(weighted("precision"), weighted("recall"), weighted("f1"), per_type, micro)


def distance_breakdown(
    gold: Graphs, pred: Graphs, label: str, max_distance: int, known_labels: Iterable[str] | None = None
) -> dict[int, float | None]:
    """F1 for ``label`` instances at each exact distance ``1..max_distance``.

    A bucket with no gold and no predicted instance is ``None`` (n/a).
    """
    if max_distance < 1:
        raise MetricsError("max_distance must be >= 1")
    if known_labels is not None and label not in set(known_labels):
        raise MetricsError(f"unknown label {label!r}")
    _check_same_dialogues(gold, pred)
    counts = {d: [0, 0, 0] for d in range(1, max_distance + 1)}
    for did in gold:
        g = {r for r in gold[did].relations if r.label == label}
        p = {r for r in pred[did].relations if r.label == label}
        for rel in g | p:
            d = distance(rel)
            if d not in counts:
                continue
            counts[d][0 if (rel in g and rel in p) else (1 if rel in p else 2)] += 1
    return {d: (PRF.from_counts(*c).f1 if any(c) else None) for d, c in counts.items()}


# ---------------------------------------------------------------------------


@dataclass
class EvalReport:
    link: PRF
    link_rel: LinkRelScore
    per_distance: dict[str, dict[int, float | None]] = field(default_factory=dict)
    cutoff: float | None = None
    gold_relations: int = 0
    pred_relations: int = 0
    pooling: str = POOLING_NOTE

    @property
    def zero_support(self) -> bool:
        """No gold relation survived the cutoff, so every score is a vacuous 0."""
        return self.gold_relations == 0

    def to_dict(self) -> dict:
        return {
            "pooling": self.pooling,
            "cutoff": None if self.cutoff is None or math.isinf(self.cutoff) else self.cutoff,
            "gold_relations": self.gold_relations,
            "pred_relations": self.pred_relations,
            "zero_support": self.zero_support,
            "link": _prf_dict(self.link),
            "link_rel": {
                "precision": self.link_rel.precision,
                "recall": self.link_rel.recall,
                "f1": self.link_rel.f1,
                "micro": _prf_dict(self.link_rel.micro),
            },
            "per_type": {
                lab: {"tp": t.tp, "fp": t.fp, "fn": t.fn, "precision": t.precision, "recall": t.recall, "f1": t.f1, "gold_support": t.gold_support}
                for lab, t in self.link_rel.per_type.items()
            },
            "per_distance": {lab: {str(d): v for d, v in table.items()} for lab, table in self.per_distance.items()},
        }

    @classmethod
    def from_dict(cls, rec: Mapping) -> EvalReport:
        per_type = {
            lab: TypeScore(v["tp"], v["fp"], v["fn"], v["precision"], v["recall"], v["f1"]) for lab, v in rec["per_type"].items()
        }
        lr = rec["link_rel"]
        return cls(
            link=PRF(**rec["link"]),
            link_rel=LinkRelScore(lr["precision"], lr["recall"], lr["f1"], per_type, PRF(**lr["micro"])),
            per_distance={lab: {int(d): v for d, v in t.items()} for lab, t in rec.get("per_distance", {}).items()},
            cutoff=rec.get("cutoff"),
            gold_relations=rec.get("gold_relations", 0),
            pred_relations=rec.get("pred_relations", 0),
            pooling=rec.get("pooling", POOLING_NOTE),
        )


def _prf_dict(s: PRF) -> dict:
    return {"precision": s.precision, "recall": s.recall, "f1": s.f1, "tp": s.tp, "fp": s.fp, "fn": s.fn}


def evaluate(
    gold: Graphs,
    pred: Graphs,
    cutoff: float | None = None,
    breakdowns: Mapping[str, int] | None = None,
) -> EvalReport:
    """Full report; ``breakdowns`` maps a label to the max distance of its table.

    Distance tables ignore ``cutoff`` so that long relations stay visible.
    """
    if cutoff is not None and math.isinf(cutoff):
        cutoff = None
    link = link_f1(gold, pred, cutoff)
    rel = link_rel_f1(gold, pred, cutoff)
    per_distance = {lab: distance_breakdown(gold, pred, lab, d) for lab, d in (breakdowns or {}).items()}
    n_gold = sum(1 for g in gold.values() for r in g.relations if _keep(r, cutoff))
    n_pred = sum(1 for g in pred.values() for r in g.relations if _keep(r, cutoff))
    return EvalReport(link, rel, per_distance, cutoff, n_gold, n_pred)


def label_histogram(graphs: Graphs) -> Counter[str]:
    return Counter(r.label for g in graphs.values() for r in g.relations)
