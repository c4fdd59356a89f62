"""Random corpora and brute-force oracles shared by the test modules.

The oracles here deliberately avoid the package's own helpers (no sets of
RelationInstance, no graph methods) so they stay independent of the code
they check.
"""

from __future__ import annotations

import random

from sdrtparse.corpus_io import CDU, Corpus, RawDialogue, RawRelation, Split
from sdrtparse.graph import MSDC_TAXONOMY, DiscourseGraph, ElementaryUnit, RelationInstance, UnitKind

CODES = MSDC_TAXONOMY.codes


def random_units(rng: random.Random, n: int, p_eeu: float = 0.3, max_turn: int = 3) -> list[ElementaryUnit]:
    units = []
    turn = 0
    left = rng.randint(1, max_turn)
    speakers = ["Architect", "Builder", "P3"]
    speaker = rng.choice(speakers)
    kind = UnitKind.EDU
    for i in range(n):
        if left == 0:
            turn += 1
            left = rng.randint(1, max_turn)
            speaker = rng.choice(speakers)
            kind = UnitKind.EEU if rng.random() < p_eeu else UnitKind.EDU
        text = f"place blue {i}" if kind is UnitKind.EEU else f"utterance {i}"
        units.append(ElementaryUnit(i, kind, speaker, text, turn))
        left -= 1
    return units


def step_last_units(units: list[ElementaryUnit], window: int = 15) -> dict[int, int]:
    """Unit index -> last unit of the engine step that attaches it (independent re-derivation)."""
    out: dict[int, int] = {}
    i = 0
    while i < len(units):
        j = i
        while j + 1 < len(units) and units[j + 1].turn_id == units[i].turn_id:
            j += 1
        # turn i..j, chunked into pieces of window+1 units
        start = i
        while start <= j:
            end = min(j, start + window)
            for u in range(start, end + 1):
                out[u] = end
            start = end + 1
        i = j + 1
    return out


def random_dialogue(
    rng: random.Random,
    did: str,
    n_units: int,
    n_rel: int,
    *,
    max_dist: int = 15,
    fit_window: int | None = None,
    p_eeu: float = 0.3,
    max_turn: int = 3,
    codes: tuple[str, ...] = CODES,
    multi_label: bool = False,
) -> RawDialogue:
    """Random flat dialogue. With ``fit_window=k`` every relation is visible when its target is attached."""
    units = random_units(rng, n_units, p_eeu, max_turn)
    last = step_last_units(units, fit_window or 15)
    rels: dict[tuple, RawRelation] = {}
    tries = 0
    while len(rels) < n_rel and tries < n_rel * 20 and n_units > 1:
        tries += 1
        tgt = rng.randrange(1, n_units)
        lo = max(0, tgt - max_dist)
        if fit_window is not None:
            lo = max(lo, last[tgt] - fit_window)
        if lo >= tgt:
            continue
        src = rng.randrange(lo, tgt)
        label = rng.choice(codes)
        key = (src, tgt, label) if multi_label else (src, tgt)
        rels.setdefault(key, RawRelation(label, src, tgt))
    return RawDialogue(did, tuple(units), tuple(sorted(rels.values(), key=lambda r: (r.src, r.tgt, r.label))))


def random_corpus(rng: random.Random, n_dialogues: int, max_units: int = 40, n_rel: int | None = None, **kw) -> Corpus:
    dialogues = []
    for d in range(n_dialogues):
        n = rng.randint(2, max_units)
        k = n_rel if n_rel is not None else rng.randint(0, 2 * n)
        dialogues.append(random_dialogue(rng, f"d{d:03d}", n, k, **kw))
    return Corpus("synthetic", Split.TEST, tuple(dialogues), MSDC_TAXONOMY)


def random_graph(rng: random.Random, did: str, n_units: int, n_rel: int, codes=CODES) -> DiscourseGraph:
    rels = []
    for _ in range(n_rel):
        j = rng.randrange(1, n_units)
        i = rng.randrange(0, j)
        rels.append(RelationInstance(i, j, rng.choice(codes)))
    return DiscourseGraph.build(did, n_units, rels)


def random_raw_with_cdus(rng: random.Random, did: str, n_units: int) -> RawDialogue:
    """Raw dialogue with nested CDUs, CDU-endpoint relations, EEU runs and isolated EEUs."""
    units = random_units(rng, n_units, p_eeu=0.5, max_turn=4)
    cdus: list[CDU] = []
    for c in range(rng.randint(0, 4)):
        members: list = rng.sample(range(n_units), rng.randint(1, min(3, n_units)))
        if cdus and rng.random() < 0.5:
            members.append(rng.choice(cdus).cdu_id)  # nest an earlier CDU: acyclic by construction
        cdus.append(CDU(f"c{c}", tuple(members)))
    ends = list(range(n_units)) + [c.cdu_id for c in cdus]
    rels = []
    for _ in range(rng.randint(0, 2 * n_units)):
        a, b = rng.choice(ends), rng.choice(ends)
        if isinstance(a, int) and isinstance(b, int):
            if a == b:
                continue
            a, b = min(a, b), max(a, b)
        rels.append(RawRelation(rng.choice(CODES), a, b))
    return RawDialogue(did, tuple(units), tuple(rels), tuple(cdus))


# ---------------------------------------------------------------------------
# brute-force oracles


def oracle_counts(gold: dict[str, DiscourseGraph], pred: dict[str, DiscourseGraph], cutoff=None):
    """Enumerate every candidate (dialogue, i, j[, label]) and count by list membership.

    Returns (link_tp, link_fp, link_fn, {label: [tp, fp, fn]}).
    """
    link = [0, 0, 0]
    per_label: dict[str, list[int]] = {}

    def keep(r):
        return cutoff is None or r.target - r.source <= cutoff

    for did in gold:
        g = [(r.source, r.target, r.label) for r in gold[did].relations if keep(r)]
        p = [(r.source, r.target, r.label) for r in pred[did].relations if keep(r)]
        n = max(gold[did].unit_count, pred[did].unit_count)
        for i in range(n):
            for j in range(i + 1, n):
                in_g = any(a == i and b == j for a, b, _ in g)
                in_p = any(a == i and b == j for a, b, _ in p)
                if in_g and in_p:
                    link[0] += 1
                elif in_p:
                    link[1] += 1
                elif in_g:
                    link[2] += 1
                labels = {lab for a, b, lab in g + p if a == i and b == j}
                for lab in labels:
                    c = per_label.setdefault(lab, [0, 0, 0])
                    lg = (i, j, lab) in g
                    lp = (i, j, lab) in p
                    c[0 if lg and lp else (1 if lp else 2)] += 1
    return link, per_label


def oracle_scores(gold, pred, cutoff=None):
    """(link p, r, f1), (weighted p, r, f1), {label: f1} from brute-force counts."""

    def prf(tp, fp, fn):
        p = tp / (tp + fp) if tp + fp else 0.0
        r = tp / (tp + fn) if tp + fn else 0.0
        return p, r, (2 * p * r / (p + r) if p + r else 0.0)

    link, per_label = oracle_counts(gold, pred, cutoff)
    lp = prf(*link)
    per = {lab: prf(*c) for lab, c in per_label.items()}
    support = {lab: c[0] + c[2] for lab, c in per_label.items()}
    total = sum(support.values())
    if total:
        w = tuple(sum(support[lab] * per[lab][k] for lab in per) / total for k in range(3))
    else:
        w = (0.0, 0.0, 0.0)
    return lp, w, {lab: v[2] for lab, v in per.items()}


def binomial_interval_99(n: int, p: float) -> tuple[float, float]:
    """Exact central 99% interval for the proportion of a Binomial(n, p) draw."""
    from math import exp, lgamma, log

    def pmf_k(k: int) -> float:
        return exp(lgamma(n + 1) - lgamma(k + 1) - lgamma(n - k + 1) + k * log(p) + (n - k) * log(1 - p))

    pmf = [pmf_k(k) for k in range(n + 1)]
    lo_k, acc = 0, 0.0
    while acc + pmf[lo_k] <= 0.005:
        acc += pmf[lo_k]
        lo_k += 1
    hi_k, acc = n, 0.0
    while acc + pmf[hi_k] <= 0.005:
        acc += pmf[hi_k]
        hi_k -= 1
    return lo_k / n, hi_k / n
