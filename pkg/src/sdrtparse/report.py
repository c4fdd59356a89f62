"""Aligned text tables for corpus statistics and evaluation reports."""

from __future__ import annotations

import json
from functools import lru_cache
from importlib import resources
from typing import Mapping, Sequence

from .corpus_io import CorpusStats
from .graph import MSDC_TAXONOMY
from .metrics import EvalReport

STAT_ROWS = (("EDU", "edu"), ("EEU", "eeu"), ("MPDU", "mpdu"), ("MPDU=3", "mpdu3"), ("MPDU>3", "mpdu_gt3"))


@lru_cache(maxsize=1)
def reference_numbers() -> dict:
    return json.loads(resources.files("sdrtparse").joinpath("data/reference.json").read_text("utf-8"))


def table(header: Sequence[str], rows: Sequence[Sequence[object]]) -> str:
    cells = [list(map(_cell, header))] + [list(map(_cell, r)) for r in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(header))]
    lines = []
    for n, row in enumerate(cells):
        lines.append("  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(row, widths))).rstrip())
        if n == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def _cell(v: object) -> str:
    if v is None:
        return "n/a"
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


def stats_dict(s: CorpusStats) -> dict[str, int]:
    return dict(zip((k for _, k in STAT_ROWS), s.as_tuple()))


def render_stats(stats: CorpusStats, name: str, reference: Mapping[str, int] | None = None) -> str:
    ours = stats_dict(stats)
    header = ["DU-type", name]
    if reference is not None:
        header += ["published", "diff"]
    rows = []
    for title, key in STAT_ROWS:
        row: list[object] = [title, ours[key]]
        if reference is not None:
            row += [reference[key], ours[key] - reference[key]]
        rows.append(row)
    return table(header, rows)


def reference_stats(profile: str, split: str) -> dict[str, int] | None:
    return reference_numbers()["stats"].get(profile, {}).get(split)


def render_summary(report: EvalReport, name: str = "this run", reference: str | None = None) -> str:
    header = ["system", "Link", "Link+Rel"]
    rows: list[list[object]] = [[name, report.link.f1, report.link_rel.f1]]
    if reference:
        for system, v in reference_numbers()["summary"].get(reference, {}).items():
            rows.append([f"{system} (published)", v["link"], v["link_rel"]])
    cut = "none" if report.cutoff is None else f"distance <= {report.cutoff:g}"
    head = f"# link: micro-averaged F1; link+rel: support-weighted F1; cutoff: {cut}; {report.pooling}\n"
    if report.zero_support:
        head += "# WARNING: no gold relations after cutoff; scores are vacuous zeros\n"
    return head + table(header, rows)


def render_per_type(report: EvalReport, reference: str | None = None) -> str:
    ref = reference_numbers()["per_type"].get(reference or "", None)
    ref_col = None
    if ref is not None:
        ref_col = ref["columns"].index("Llamipa3+p")
    order = [c for c in MSDC_TAXONOMY.codes if c in report.link_rel.per_type]
    order += sorted(set(report.link_rel.per_type) - set(order))
    header = ["relation", "support", "P", "R", "F1"] + (["F1 (published)"] if ref is not None else [])
    rows = []
    for lab in order:
        t = report.link_rel.per_type[lab]
        row: list[object] = [lab, t.gold_support, t.precision, t.recall, t.f1]
        if ref is not None:
            vals = ref["rows"].get(lab)
            row.append(vals[ref_col] if vals else None)
        rows.append(row)
    tail: list[list[object]] = [["Link+Rel F1", report.gold_relations, report.link_rel.precision, report.link_rel.recall, report.link_rel.f1]]
    tail.append(["Link F1", report.link.support, report.link.precision, report.link.recall, report.link.f1])
    if ref is not None:
        tail[0].append(ref["rows"]["link_rel"][ref_col])
        tail[1].append(ref["rows"]["link"][ref_col])
    return table(header, rows + tail)


def render_distance(report: EvalReport, label: str, reference: str | None = None) -> str:
    dist = report.per_distance[label]
    ds = sorted(dist)
    rows: list[list[object]] = [["this run"] + [dist[d] for d in ds]]
    if reference and label == "NARR":
        for system, vals in reference_numbers()["narration_distance"].get(reference, {}).items():
            rows.append([f"{system} (published)"] + [vals.get(str(d)) for d in ds])
    return f"# {label} F1 by distance\n" + table(["Distance"] + [str(d) for d in ds], rows)


def render_report(report: EvalReport, reference: str | None = None) -> str:
    parts = [render_summary(report, reference=reference), render_per_type(report, reference)]
    for label in report.per_distance:
        parts.append(render_distance(report, label, reference))
    return "\n".join(parts)
