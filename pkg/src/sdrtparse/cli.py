"""Command-line entry point: preprocess, stats, parse, eval, ablate, report.

Every command writes its outputs plus ``<output>.manifest.json``. Failures
print one JSON line on stderr and exit with 2 (config), 3 (input) or
4 (backend).
"""

from __future__ import annotations

import argparse
import datetime as _dt
import hashlib
import json
import logging
import sys
from pathlib import Path
from typing import Any, Sequence

import yaml

from . import __version__
from .ablation import (
    ablate_correction_triangle,
    ablate_qap,
    perturb_random,
    random_transform,
    second_pass_narration,
    strip_structure,
)
from .backend import BACKEND_KINDS, BackendError, make_backend
from .corpus_io import Corpus, CorpusFormatError, Format, corpus_stats, dialogue_stats, dumps_line, load_corpus, write_corpus
from .engine import (
    DEFAULT_WINDOW,
    EngineConfig,
    Mode,
    StepRecord,
    load_predictions,
    load_steplog,
    predict_sample,
    run_corpus,
    write_predictions,
    write_steplog,
)
from .graph import MSDC_TAXONOMY
from .metrics import EvalReport, MetricsError, evaluate
from .preprocess import PreprocessError, Profile, preprocess_pipeline
from .report import reference_stats, render_report, render_stats, stats_dict

log = logging.getLogger("sdrtparse")

EXIT_OK, EXIT_CONFIG, EXIT_INPUT, EXIT_BACKEND = 0, 2, 3, 4


class CliError(Exception):
    def __init__(self, code: int, kind: str, message: str):
        super().__init__(message)
        self.code = code
        self.kind = kind


def config_error(msg: str) -> CliError:
    return CliError(EXIT_CONFIG, "config", msg)


def input_error(msg: str) -> CliError:
    return CliError(EXIT_INPUT, "input", msg)


# ---------------------------------------------------------------------------
# config & manifests


def load_config(path: str | None) -> dict:
    if not path:
        return {}
    try:
        with open(path, encoding="utf-8") as f:
            conf = yaml.safe_load(f) or {}
    except OSError as exc:
        raise config_error(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise config_error(f"bad config {path}: {exc}") from exc
    if not isinstance(conf, dict):
        raise config_error(f"config {path} must be a mapping")
    return conf


def _set(conf: dict, dotted: str, value: Any) -> None:
    if value is None:
        return
    node = conf
    *parents, leaf = dotted.split(".")
    for p in parents:
        node = node.setdefault(p, {})
    node[leaf] = value


def effective_config(args: argparse.Namespace) -> dict:
    conf = load_config(args.config)
    _set(conf, "seed", getattr(args, "seed", None))
    for flag, key in (
        ("mode", "engine.mode"),
        ("window", "engine.window"),
        ("taxonomy", "engine.taxonomy"),
        ("backend", "backend.kind"),
        ("url", "backend.url"),
        ("model", "backend.model"),
        ("p_drop", "backend.p_drop"),
        ("p_relabel", "backend.p_relabel"),
        ("max_attempts", "backend.max_attempts"),
        ("concurrency", "backend.concurrency"),
        ("timeout_ms", "backend.timeout_ms"),
    ):
        _set(conf, key, getattr(args, flag, None))
    backend = conf.get("backend")
    if isinstance(backend, dict) and "seed" not in backend and "seed" in conf:
        backend["seed"] = conf["seed"]
    return conf


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    p = Path(path)
    files = sorted(p.rglob("*")) if p.is_dir() else [p]
    for f in files:
        if f.is_file():
            h.update(f.read_bytes())
    return h.hexdigest()


def write_manifest(out: str | Path, command: str, conf: dict, inputs: dict[str, str | None], started: str) -> None:
    manifest = {
        "command": command,
        "tool_version": __version__,
        "config_hash": hashlib.sha256(json.dumps(conf, sort_keys=True).encode()).hexdigest(),
        "config": conf,
        "inputs": {k: {"path": v, "sha256": sha256_file(v)} for k, v in sorted(inputs.items()) if v},
        "seed": conf.get("seed"),
        "started": started,
        "finished": _now(),
    }
    Path(f"{out}.manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def _load(path: str, fmt: str = "canonical", **kw: Any) -> Corpus:
    try:
        return load_corpus(path, fmt, **kw)
    except (CorpusFormatError, OSError) as exc:
        raise input_error(str(exc)) from exc


def engine_config(conf: dict, taxonomy) -> EngineConfig:
    eng = conf.get("engine", {})
    try:
        return EngineConfig(
            window_size=int(eng.get("window", DEFAULT_WINDOW)),
            mode=Mode(eng.get("mode", "predicted")),
            taxonomy=taxonomy,
            max_new_tokens=int(eng.get("max_new_tokens", 256)),
            temperature=float(eng.get("temperature", 0.0)),
            stop_sequences=tuple(eng.get("stop", ())),
        )
    except (TypeError, ValueError) as exc:
        raise config_error(f"bad engine config: {exc}") from exc


def build_backend(conf: dict, corpus: Corpus | None):
    bconf = dict(conf.get("backend") or {})
    if bconf.get("kind", "oracle") not in BACKEND_KINDS:
        raise config_error(f"unknown backend kind {bconf.get('kind')!r}")
    try:
        gold = corpus.gold_graphs() if corpus is not None and bconf.get("kind", "oracle") != "remote" else None
        return make_backend(bconf, gold=gold, taxonomy=corpus.taxonomy if corpus else None)
    except ValueError as exc:
        raise config_error(str(exc)) from exc


# ---------------------------------------------------------------------------
# commands


def cmd_preprocess(args: argparse.Namespace) -> int:
    started, conf = _now(), effective_config(args)
    corpus = _load(args.input, args.format)
    stages = args.stages.split(",") if args.stages else None
    try:
        result = preprocess_pipeline(corpus, args.profile, stages)
    except PreprocessError as exc:
        raise input_error(str(exc)) from exc
    write_corpus(result.corpus, args.out)
    if args.remap:
        with open(args.remap, "w", encoding="utf-8", newline="\n") as f:
            for did, trace in result.traces.items():
                f.write(dumps_line({"id": did, "remap": [[old, new] for old, new in sorted(trace.remap.items())]}) + "\n")
    if args.discards:
        with open(args.discards, "w", encoding="utf-8", newline="\n") as f:
            for d in result.discards:
                f.write(dumps_line({"id": d.dialogue_id, "reason": d.reason, "record": d.record}) + "\n")
    log.info("preprocessed %d dialogues, %d discards", len(result.corpus.dialogues), len(result.discards))
    write_manifest(args.out, "preprocess", conf | {"profile": args.profile, "stages": stages}, {"in": args.input}, started)
    return EXIT_OK


def cmd_stats(args: argparse.Namespace) -> int:
    started, conf = _now(), effective_config(args)
    corpus = _load(args.input, args.format)
    if args.profile:
        corpus = preprocess_pipeline(corpus, args.profile).corpus
    try:
        stats = corpus_stats(corpus)
    except ValueError as exc:
        raise input_error(str(exc)) from exc
    ref = reference_stats(args.reference, args.split or corpus.split.value) if args.reference else None
    text = render_stats(stats, corpus.name, ref)
    if ref is not None and stats_dict(stats) != ref:
        text += "# counts differ from the published table (earlier corpus variants are known not to match exactly)\n"
        if args.per_dialogue:
            text += "# per-dialogue counts (EDU EEU MPDU MPDU=3 MPDU>3):\n"
            for d in corpus.dialogues:
                text += f"{d.dialogue_id}\t" + " ".join(map(str, dialogue_stats(d).as_tuple())) + "\n"
    sys.stdout.write(text)
    if args.out:
        payload = {"name": corpus.name, "split": corpus.split.value, "stats": stats_dict(stats)}
        if ref is not None:
            payload["published"] = ref
        Path(args.out).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        write_manifest(args.out, "stats", conf, {"in": args.input}, started)
    return EXIT_OK


def cmd_parse(args: argparse.Namespace) -> int:
    started, conf = _now(), effective_config(args)
    corpus = _load(args.input)
    cfg = engine_config(conf, corpus.taxonomy)
    backend = build_backend(conf, corpus)
    seed = int(conf.get("seed", 0))
    transform = {"rand": random_transform(seed, corpus.taxonomy), "null": strip_structure, None: None}[args.ablate]
    run = run_corpus(corpus, backend, cfg, parallelism=args.parallelism, transform=transform)
    write_predictions(run.graphs, args.out, corpus.taxonomy)
    if args.log:
        write_steplog((steplog for _, steplog in run.results.values()), args.log)
    write_manifest(args.out, "parse", conf, {"in": args.input}, started)
    if run.failures:
        for did, msg in run.failures.items():
            log.error("dialogue %s aborted: %s", did, msg)
        raise CliError(EXIT_BACKEND, "backend", f"{len(run.failures)} dialogue(s) aborted: {sorted(run.failures)}")
    return EXIT_OK


def _parse_breakdown(arg: str, corpus: Corpus) -> tuple[str, int]:
    name, _, dist = arg.partition(":")
    code = corpus.taxonomy.lookup(name) or corpus.taxonomy.lookup(name.upper())
    if code is None:
        raise config_error(f"unknown label in --breakdown {arg!r}")
    try:
        return code, int(dist or 15)
    except ValueError:
        raise config_error(f"bad distance in --breakdown {arg!r}") from None


def cmd_eval(args: argparse.Namespace) -> int:
    started, conf = _now(), effective_config(args)
    gold_corpus = _load(args.gold)
    try:
        pred = load_predictions(args.pred)
    except (OSError, ValueError, KeyError) as exc:
        raise input_error(f"bad predictions file {args.pred}: {exc}") from exc
    breakdowns = dict(_parse_breakdown(b, gold_corpus) for b in args.breakdown or [])
    try:
        report = evaluate(gold_corpus.gold_graphs(), pred, args.cutoff, breakdowns)
    except (MetricsError, ValueError) as exc:
        raise input_error(str(exc)) from exc
    text = render_report(report)
    sys.stdout.write(text)
    Path(args.out).write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    if args.text:
        Path(args.text).write_text(text, encoding="utf-8")
    write_manifest(args.out, "eval", conf | {"cutoff": args.cutoff, "breakdown": args.breakdown}, {"gold": args.gold, "pred": args.pred}, started)
    return EXIT_OK


def _step_predictions(records: Sequence[StepRecord], pred_path: str | None) -> dict[tuple[str, int], list]:
    if pred_path is None:
        return {(r.sample.dialogue_id, r.sample.step): r.accepted for r in records}
    try:
        graphs = load_predictions(pred_path)
    except (OSError, ValueError, KeyError) as exc:
        raise input_error(f"bad predictions file {pred_path}: {exc}") from exc
    out = {}
    for r in records:
        g = graphs.get(r.sample.dialogue_id)
        if g is None:
            raise input_error(f"predictions lack dialogue {r.sample.dialogue_id}")
        out[(r.sample.dialogue_id, r.sample.step)] = g.targeting(r.sample.current_turn)
    return out


def cmd_ablate(args: argparse.Namespace) -> int:
    started, conf = _now(), effective_config(args)
    seed = int(conf.get("seed", 0))
    inputs = {"samples": args.samples, "pred": args.pred, "gold": args.gold}
    if args.kind == "narr-pass2":
        if not (args.pred and args.gold):
            raise config_error("narr-pass2 needs --pred and --gold (the corpus, for unit kinds)")
        corpus = _load(args.gold)
        try:
            graphs = load_predictions(args.pred)
        except (OSError, ValueError, KeyError) as exc:
            raise input_error(f"bad predictions file {args.pred}: {exc}") from exc
        dialogues = corpus.by_id()
        missing = sorted(set(graphs) - set(dialogues))
        if missing:
            raise input_error(f"predictions for unknown dialogues {missing[:5]}")
        out = {did: second_pass_narration(g, dialogues[did]) for did, g in graphs.items()}
        write_predictions(out, args.out, corpus.taxonomy)
        write_manifest(args.out, "ablate", conf | {"kind": args.kind}, inputs, started)
        return EXIT_OK

    if not args.samples:
        raise config_error(f"--kind {args.kind} needs --samples (a step log)")
    try:
        records = load_steplog(args.samples)
    except (OSError, ValueError, KeyError) as exc:
        raise input_error(f"bad samples file {args.samples}: {exc}") from exc
    corpus = _load(args.gold) if args.gold else None
    taxonomy = corpus.taxonomy if corpus else MSDC_TAXONOMY
    samples = [r.sample for r in records]
    if args.kind == "rand":
        edited = [perturb_random(s, seed, taxonomy) for s in samples]
    elif args.kind == "null":
        edited = [strip_structure(s) for s in samples]
    else:
        if corpus is None:
            raise config_error(f"--kind {args.kind} needs --gold to judge prediction correctness")
        preds = _step_predictions(records, args.pred)
        fn = ablate_qap if args.kind == "qap" else ablate_correction_triangle
        try:
            edited = fn(samples, preds, corpus.gold_graphs())
        except ValueError as exc:
            raise input_error(str(exc)) from exc

    conf_backend = conf.get("backend")
    with open(args.out, "w", encoding="utf-8", newline="\n") as f:
        if conf_backend:
            cfg = engine_config(conf, taxonomy)
            backend = build_backend(conf, corpus)
            for s in edited:
                try:
                    raw, parsed = predict_sample(s, backend, cfg)
                except BackendError as exc:
                    raise CliError(EXIT_BACKEND, "backend", str(exc)) from exc
                rec = StepRecord(s, s.window_units[-1].turn_id, raw, parsed.accepted, parsed.rejected)
                f.write(dumps_line(rec.to_dict()) + "\n")
        else:
            for s in edited:
                f.write(dumps_line(s.to_dict()) + "\n")
    log.info("ablate %s: %d of %d samples edited", args.kind, len(edited), len(samples))
    write_manifest(args.out, "ablate", conf | {"kind": args.kind}, inputs, started)
    return EXIT_OK


def cmd_report(args: argparse.Namespace) -> int:
    started, conf = _now(), effective_config(args)
    try:
        report = EvalReport.from_dict(json.loads(Path(args.eval).read_text(encoding="utf-8")))
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise input_error(f"bad eval report {args.eval}: {exc}") from exc
    text = render_report(report, args.reference)
    sys.stdout.write(text)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
        write_manifest(args.out, "report", conf | {"reference": args.reference}, {"eval": args.eval}, started)
    return EXIT_OK


# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    """Usage errors become config errors so they share the JSON error line."""

    def error(self, message: str) -> None:  # type: ignore[override]
        raise config_error(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="sdrtparse", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp: argparse.ArgumentParser) -> None:
        sp.add_argument("--config", help="YAML run config; flags override it")
        sp.add_argument("--seed", type=int)

    sp = sub.add_parser("preprocess", help="flatten / compress / prune a corpus")
    common(sp)
    sp.add_argument("--profile", required=True, choices=[x.value for x in Profile])
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--remap", help="write old->new unit index pairs per dialogue")
    sp.add_argument("--discards", help="write every discarded relation with its reason")
    sp.add_argument("--format", default="canonical", choices=[x.value for x in Format])
    sp.add_argument("--stages", help="comma-separated stage order overriding the profile")
    sp.set_defaults(func=cmd_preprocess)

    sp = sub.add_parser("stats", help="EDU/EEU/MPDU counts")
    common(sp)
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--format", default="canonical", choices=[x.value for x in Format])
    sp.add_argument("--profile", choices=[x.value for x in Profile], help="preprocess before counting")
    sp.add_argument("--reference", choices=["msdc", "stac_sit", "stac_l"], help="show published counts alongside")
    sp.add_argument("--split", choices=["train", "test"])
    sp.add_argument("--per-dialogue", action="store_true", help="list per-dialogue counts on mismatch")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_stats)

    sp = sub.add_parser("parse", help="run the incremental parser over a corpus")
    common(sp)
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--out", required=True, help="predictions file")
    sp.add_argument("--log", help="step log (one sample + generation per line)")
    sp.add_argument("--mode", choices=[m.value for m in Mode])
    sp.add_argument("--window", type=int)
    sp.add_argument("--backend", choices=BACKEND_KINDS)
    sp.add_argument("--url")
    sp.add_argument("--model")
    sp.add_argument("--p-drop", type=float)
    sp.add_argument("--p-relabel", type=float)
    sp.add_argument("--max-attempts", type=int)
    sp.add_argument("--concurrency", type=int)
    sp.add_argument("--timeout-ms", type=int)
    sp.add_argument("--parallelism", type=int, default=1)
    sp.add_argument("--ablate", choices=["rand", "null"], help="perturb every step's context structure")
    sp.set_defaults(func=cmd_parse)

    sp = sub.add_parser("eval", help="score predictions against gold")
    common(sp)
    sp.add_argument("--gold", required=True, help="preprocessed canonical corpus")
    sp.add_argument("--pred", required=True)
    sp.add_argument("--cutoff", type=float, help="drop relations longer than this distance")
    sp.add_argument("--breakdown", action="append", help="LABEL:MAXDIST, e.g. narration:15")
    sp.add_argument("--out", required=True, help="JSON report")
    sp.add_argument("--text", help="also write the aligned text tables here")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("ablate", help="context-structure ablations")
    common(sp)
    sp.add_argument("--kind", required=True, choices=["rand", "null", "qap", "corr-triangle", "narr-pass2"])
    sp.add_argument("--samples", help="step log from `parse --log`")
    sp.add_argument("--pred", help="predictions file (default: accepted relations in the step log)")
    sp.add_argument("--gold", help="preprocessed canonical corpus")
    sp.add_argument("--out", required=True)
    sp.add_argument("--backend", choices=BACKEND_KINDS, help="re-generate on the edited samples")
    sp.add_argument("--url")
    sp.add_argument("--model")
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("report", help="render an eval report as tables")
    common(sp)
    sp.add_argument("--eval", required=True)
    sp.add_argument("--reference", choices=["msdc", "stac_sit", "stac_l", "molweni"])
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_report)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(
            level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s"
        )
        return args.func(args)
    except CliError as exc:
        sys.stderr.write(json.dumps({"error": exc.kind, "exit": exc.code, "message": str(exc)}) + "\n")
        return exc.code
    except BackendError as exc:
        sys.stderr.write(json.dumps({"error": "backend", "exit": EXIT_BACKEND, "message": str(exc)}) + "\n")
        return EXIT_BACKEND


if __name__ == "__main__":
    sys.exit(main())
