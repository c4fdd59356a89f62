"""Elementary units, relation instances and dialogue-level discourse graphs."""

from __future__ import annotations

import bisect
import re
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Iterator


class UnitKind(str, Enum):
    EDU = "EDU"  # linguistic (chat) unit
    EEU = "EEU"  # nonlinguistic event


@dataclass(frozen=True)
class ElementaryUnit:
    index: int
    kind: UnitKind
    speaker: str
    text: str
    turn_id: int

    def __post_init__(self) -> None:
        if self.index < 0 or self.turn_id < 0:
            raise ValueError(f"negative index or turn in unit {self.index}")
        if not self.text:
            raise ValueError(f"unit {self.index} has empty text")


CODE_RE = re.compile(r"[A-Z][A-Z-]*")


@dataclass(frozen=True)
class RelationLabel:
    code: str
    long_name: str
    taxonomy_id: str

    def __post_init__(self) -> None:
        if not CODE_RE.fullmatch(self.code):
            raise ValueError(f"bad relation code {self.code!r}")


class Taxonomy:
    """A named inventory of relation labels, indexed by short code and long name."""

    def __init__(self, taxonomy_id: str, labels: Iterable[tuple[str, str]]):
        self.taxonomy_id = taxonomy_id
        self._by_code: dict[str, RelationLabel] = {}
        self._by_name: dict[str, RelationLabel] = {}
        for code, long_name in labels:
            if code in self._by_code:
                raise ValueError(f"duplicate code {code} in taxonomy {taxonomy_id}")
            label = RelationLabel(code, long_name, taxonomy_id)
            self._by_code[code] = label
            self._by_name[_norm_name(long_name)] = label

    def __contains__(self, code: object) -> bool:
        return code in self._by_code

    def __iter__(self) -> Iterator[RelationLabel]:
        return iter(self._by_code.values())

    def __len__(self) -> int:
        return len(self._by_code)

    def __repr__(self) -> str:
        return f"Taxonomy({self.taxonomy_id!r}, {len(self)} labels)"

    @property
    def codes(self) -> tuple[str, ...]:
        return tuple(self._by_code)

    def label(self, code: str) -> RelationLabel:
        return self._by_code[code]

    def lookup(self, name: str) -> str | None:
        """Resolve a short code or a long name (any casing, `_`/space/`-`) to a code."""
        if name in self._by_code:
            return name
        label = self._by_name.get(_norm_name(name))
        return label.code if label else None


def _norm_name(name: str) -> str:
    return re.sub(r"[\s_\-]+", "-", name.strip().lower())


# Ordered by corpus frequency, as in the per-type breakdown tables.
MSDC_TAXONOMY = Taxonomy(
    "msdc",
    [
        ("RES", "Result"),
        ("ACK", "Acknowledgement"),
        ("NARR", "Narration"),
        ("ELAB", "Elaboration"),
        ("CORR", "Correction"),
        ("CONT", "Continuation"),
        ("QAP", "Question-answer Pair"),
        ("COM", "Comment"),
        ("CONFQ", "Confirmation-Question"),
        ("CLARIFQ", "Clarification-Question"),
        ("CONTR", "Contrast"),
        ("QELAB", "Question-Elaboration"),
        ("ALT", "Alternation"),
        ("EXPL", "Explanation"),
        ("COND", "Conditional"),
        ("SEQ", "Sequence"),
    ],
)

STAC_TAXONOMY = Taxonomy(
    "stac",
    [
        ("QAP", "Question-answer_pair"),
        ("COM", "Comment"),
        ("ACK", "Acknowledgement"),
        ("CONT", "Continuation"),
        ("ELAB", "Elaboration"),
        ("QELAB", "Q-Elab"),
        ("CONTR", "Contrast"),
        ("EXPL", "Explanation"),
        ("CLARIFQ", "Clarification_question"),
        ("RES", "Result"),
        ("BACK", "Background"),
        ("NARR", "Narration"),
        ("ALT", "Alternation"),
        ("COND", "Conditional"),
        ("CORR", "Correction"),
        ("PAR", "Parallel"),
        ("SEQ", "Sequence"),
    ],
)

# Molweni uses the STAC relation inventory minus Sequence.
MOLWENI_TAXONOMY = Taxonomy(
    "molweni", [(lab.code, lab.long_name) for lab in STAC_TAXONOMY if lab.code != "SEQ"]
)

TAXONOMIES = {t.taxonomy_id: t for t in (MSDC_TAXONOMY, STAC_TAXONOMY, MOLWENI_TAXONOMY)}


def get_taxonomy(name: str) -> Taxonomy:
    try:
        return TAXONOMIES[name]
    except KeyError:
        raise ValueError(f"unknown taxonomy {name!r}; known: {sorted(TAXONOMIES)}") from None


@dataclass(frozen=True, order=True)
class RelationInstance:
    """A typed edge ``CODE(source,target)``; ordering is by (source, target, label).

    Construction does not check endpoint order so that malformed input can
    be represented and reported by :func:`validate`; :func:`add_relation`
    enforces ``source < target``.
    """

    source: int
    target: int
    label: str

    def __str__(self) -> str:
        return f"{self.label}({self.source},{self.target})"

    @property
    def pair(self) -> tuple[int, int]:
        return (self.source, self.target)

    @classmethod
    def parse(cls, token: str) -> RelationInstance:
        m = TOKEN_RE.fullmatch(token.strip())
        if not m:
            raise ValueError(f"not a relation token: {token!r}")
        return cls(int(m.group(2)), int(m.group(3)), m.group(1))


# Canonical surface form shared by prompt serialization and output parsing.
TOKEN_RE = re.compile(r"([A-Z][A-Z-]*)\((\d+),(\d+)\)")


def distance(rel: RelationInstance) -> int:
    return rel.target - rel.source


def format_relations(rels: Iterable[RelationInstance]) -> str:
    """Space-separated tokens in (source, target) order."""
    return " ".join(str(r) for r in sorted(rels))


def parse_relations(text: str) -> list[RelationInstance]:
    """Strict inverse of :func:`format_relations`."""
    return [RelationInstance.parse(tok) for tok in text.split()]


@dataclass(frozen=True)
class DiscourseGraph:
    """Relation instances over one dialogue. Immutable; use :func:`add_relation`.

    ``relations`` is kept sorted by (source, target, label) so that equality
    is set equality. ``provenance`` tags relations that did not come from the first-pass
    parser (e.g. ``"second_pass"``); it is ignored by equality.
    """

    dialogue_id: str
    unit_count: int
    relations: tuple[RelationInstance, ...] = ()
    provenance: dict[RelationInstance, str] = field(
        default_factory=dict, compare=False, hash=False, repr=False
    )

    def __post_init__(self) -> None:
        object.__setattr__(self, "relations", tuple(sorted(self.relations)))

    @classmethod
    def build(
        cls, dialogue_id: str, unit_count: int, relations: Iterable[RelationInstance] = ()
    ) -> DiscourseGraph:
        """Construct with bounds checking and silent deduplication."""
        rels = set()
        for rel in relations:
            _check_insertable(rel, dialogue_id, unit_count)
            rels.add(rel)
        return cls(dialogue_id, unit_count, tuple(sorted(rels)))

    def __len__(self) -> int:
        return len(self.relations)

    def __iter__(self) -> Iterator[RelationInstance]:
        return iter(self.relations)

    def __contains__(self, rel: object) -> bool:
        return rel in self._relset

    @property
    def _relset(self) -> frozenset[RelationInstance]:
        cached = self.__dict__.get("_relset_cache")
        if cached is None:
            cached = frozenset(self.relations)
            object.__setattr__(self, "_relset_cache", cached)
        return cached

    def pairs(self) -> set[tuple[int, int]]:
        return {r.pair for r in self.relations}

    def targeting(self, units: Iterable[int]) -> list[RelationInstance]:
        wanted = set(units)
        return [r for r in self.relations if r.target in wanted]

    def in_degrees(self) -> Counter[int]:
        return Counter(r.target for r in self.relations)


def add_relation(graph: DiscourseGraph, rel: RelationInstance) -> tuple[DiscourseGraph, str | None]:
    """Return ``(new_graph, note)``; ``note`` is ``"duplicate"`` when ``rel`` was already present."""
    _check_insertable(rel, graph.dialogue_id, graph.unit_count)
    if rel in graph:
        return graph, "duplicate"
    rels = list(graph.relations)
    bisect.insort(rels, rel)
    return DiscourseGraph(graph.dialogue_id, graph.unit_count, tuple(rels), dict(graph.provenance)), None


def _check_insertable(rel: RelationInstance, dialogue_id: str, unit_count: int) -> None:
    if rel.source >= rel.target:
        raise ValueError(f"relation must point forward: {rel}")
    if rel.source < 0 or rel.target >= unit_count:
        raise ValueError(
            f"endpoint out of range: {rel} in dialogue {dialogue_id} with {unit_count} units"
        )


class Violation(str, Enum):
    UNKNOWN_LABEL = "unknown_label"
    INDEX_ORDER = "index_order"
    OUT_OF_RANGE = "out_of_range"
    DUPLICATE = "duplicate"
    CYCLE = "cycle"


@dataclass
class ValidationReport:
    violations: list[tuple[Violation, str]] = field(default_factory=list)
    multi_label_pairs: int = 0  # informative only, not a violation

    def __bool__(self) -> bool:
        return bool(self.violations)

    def __len__(self) -> int:
        return len(self.violations)

    def of_kind(self, kind: Violation) -> list[str]:
        return [what for k, what in self.violations if k is kind]


def validate(graph: DiscourseGraph, taxonomy: Taxonomy) -> ValidationReport:
    """Collect every well-formedness problem; never raises.

    Relations are read through ``graph.relations`` without relying on the
    constructor checks, so graphs assembled by other means (e.g.
    ``object.__new__`` or deserialised tuples) are checked too.
    """
    report = ValidationReport()
    seen: set[tuple[str, int, int]] = set()
    labels_per_pair: dict[tuple[int, int], set[str]] = {}
    edges: list[tuple[int, int]] = []
    for rel in graph.relations:
        src, tgt, lab = rel.source, rel.target, rel.label
        desc = f"{lab}({src},{tgt})"
        if lab not in taxonomy:
            report.violations.append((Violation.UNKNOWN_LABEL, desc))
        if src >= tgt:
            report.violations.append((Violation.INDEX_ORDER, desc))
        if not (0 <= src < graph.unit_count and 0 <= tgt < graph.unit_count):
            report.violations.append((Violation.OUT_OF_RANGE, desc))
        key = (lab, src, tgt)
        if key in seen:
            report.violations.append((Violation.DUPLICATE, desc))
        seen.add(key)
        labels_per_pair.setdefault((src, tgt), set()).add(lab)
        edges.append((src, tgt))
    report.multi_label_pairs = sum(1 for labs in labels_per_pair.values() if len(labs) > 1)
    if topological_order(graph.unit_count, edges) is None:
        report.violations.append((Violation.CYCLE, graph.dialogue_id))
    return report


def topological_order(n: int, edges: Iterable[tuple[int, int]]) -> list[int] | None:
    """Kahn's algorithm over nodes ``0..n-1``; ``None`` if a cycle exists.

    Endpoints outside the range are included as extra nodes so that the
    check stays independent of the range check.
    """
    succ: dict[int, list[int]] = {i: [] for i in range(n)}
    indeg: dict[int, int] = {i: 0 for i in range(n)}
    for a, b in edges:
        succ.setdefault(a, []).append(b)
        succ.setdefault(b, [])
        indeg.setdefault(a, 0)
        indeg[b] = indeg.get(b, 0) + 1
    queue = sorted(v for v, d in indeg.items() if d == 0)
    order = []
    while queue:
        v = queue.pop()
        order.append(v)
        for w in succ[v]:
            indeg[w] -= 1
            if indeg[w] == 0:
                queue.append(w)
    return order if len(order) == len(indeg) else None


@dataclass(frozen=True)
class MPDUStats:
    units: frozenset[int]
    exactly3: int
    more_than3: int

    def __len__(self) -> int:
        return len(self.units)


def mpdu_set(graph: DiscourseGraph) -> MPDUStats:
    """Multi-parent units: in-degree counted over distinct incoming relation instances."""
    indeg = graph.in_degrees()
    return MPDUStats(
        units=frozenset(u for u, d in indeg.items() if d >= 2),
        exactly3=sum(1 for d in indeg.values() if d == 3),
        more_than3=sum(1 for d in indeg.values() if d > 3),
    )
