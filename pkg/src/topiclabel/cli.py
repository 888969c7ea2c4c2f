"""Command-line entry point: ``topiclabel <subcommand> ...``.

Exit status: 0 success, 1 validation error (bad flags, bad input), 2 runtime failure.
Diagnostics go to stderr; data goes to stdout or files.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace

from topiclabel import annotate as ann
from topiclabel.corpus import load_topics, validate_topic_set
from topiclabel.errors import TopicLabelError, ValidationError
from topiclabel.gateway import run_cost_report
from topiclabel.report import (
    FORMATS,
    build_report,
    compute_metrics,
    emit,
    render_text,
    section_tables,
)
from topiclabel.runner import load_config, load_store, resume_run, run_experiment
from topiclabel.similarity import HASH_PROVIDER, Embedder

logger = logging.getLogger("topiclabel")


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage problems are validation errors (exit 1)
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="topiclabel", description="Generate and evaluate LLM topic labels.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("ingest-check", help="validate a topic file")
    s.add_argument("--topics", required=True, help="JSON Lines topic file")

    s = sub.add_parser("run", help="run (or continue) the experiment grid from a config file")
    s.add_argument("--config", required=True, help="YAML/JSON experiment config")

    s = sub.add_parser("resume", help="execute missing or failed cells of a run")
    s.add_argument("--run-dir", required=True)
    s.add_argument("--config", help="optional config to check against the run snapshot")

    s = sub.add_parser("status", help="cell counts per backend x prompt")
    s.add_argument("--run-dir", required=True)

    s = sub.add_parser("metrics", help="print distinctness, stability and similarity tables")
    s.add_argument("--run-dir", required=True)
    s.add_argument("--provider", help="embedding provider id (config provider or 'hash')")

    s = sub.add_parser("annotate", help="score labels interactively on the 1-5 rubric")
    s.add_argument("--run-dir", required=True)
    s.add_argument("--annotator", required=True, help="annotator id recorded with each score")
    s.add_argument("--sampling", choices=("modal", "all"), default="modal")
    s.add_argument("--input-file", help="read answers from this file instead of the terminal")

    s = sub.add_parser("scores", help="aggregate human scores per backend x prompt")
    s.add_argument("--run-dir", required=True)
    s.add_argument("--annotations", help="annotation CSV (default: <run-dir>/annotations.csv)")
    s.add_argument("--threshold", type=float, default=ann.ACCEPTANCE_THRESHOLD)

    s = sub.add_parser("costs", help="token and USD totals per backend")
    s.add_argument("--run-dir", required=True)

    s = sub.add_parser("report", help="write every report section to files")
    s.add_argument("--run-dir", required=True)
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--formats", default="csv,json",
                   help=f"comma-separated subset of {','.join(FORMATS)}")
    s.add_argument("--no-header-timestamp", action="store_true",
                   help="omit generation time from headers (byte-stable output)")
    s.add_argument("--provider", help="embedding provider id (config provider or 'hash')")
    s.add_argument("--annotations", help="annotation CSV (default: <run-dir>/annotations.csv)")
    return p


def _embedder(store, provider_id: str | None) -> Embedder:
    configured = store.provider
    if provider_id in (None, "") and configured is not None:
        spec = configured
    elif provider_id in (None, "", HASH_PROVIDER.id):
        spec = HASH_PROVIDER
    elif configured is not None and configured.id == provider_id:
        spec = configured
    else:
        raise ValidationError(f"unknown provider {provider_id!r}")
    if spec.cache_path is None:
        spec = replace(spec, cache_path=str(store.run_dir / "embeddings.cache"))
    return Embedder(spec)


def _annotations(store, path: str | None):
    return ann.import_annotations(path or store.run_dir / ann.ANNOTATIONS_FILE)


def _print_section(name: str, table) -> None:
    cols, rows, notes = table
    print(f"== {name} ==")
    print(render_text(cols, rows, notes))


def dispatch(args: argparse.Namespace) -> int:
    cmd = args.command
    if cmd == "ingest-check":
        ts = load_topics(args.topics)
        for w in validate_topic_set(ts):
            logger.warning(w)
        print(f"{len(ts)} topics OK")
        return 0
    if cmd == "run":
        store = run_experiment(load_config(args.config))
        return _report_status(store, strict=True)
    if cmd == "resume":
        cfg = load_config(args.config) if args.config else None
        return _report_status(resume_run(args.run_dir, cfg), strict=True)
    store = load_store(args.run_dir)
    if cmd == "status":
        _report_status(store)
        return 0
    if cmd == "metrics":
        tables = section_tables(build_report(store, compute_metrics(store, _embedder(store, args.provider)),
                                             costs=[]))
        for name in ("fig1a", "fig1b", "fig1c"):
            _print_section(name, tables[name])
        return 0
    if cmd == "annotate":
        if args.input_file:
            with open(args.input_file, encoding="utf-8") as fh:
                added = ann.annotate_session(store.labels, store.topics, store.run_dir,
                                             args.annotator, args.sampling, stdin=fh,
                                             stdout=sys.stderr)
        else:
            added = ann.annotate_session(store.labels, store.topics, store.run_dir,
                                         args.annotator, args.sampling, stdout=sys.stderr)
        print(f"{len(added)} annotations recorded")
        return 0
    if cmd == "scores":
        annotations = _annotations(store, args.annotations)
        if not annotations:
            raise ValidationError("no annotations found")
        for problem in ann.check_references(annotations, store.labels):
            logger.warning("annotation does not match a run label: %s", problem)
        aggs = ann.aggregate_scores(annotations, args.threshold, per_annotator=True)
        rows = [[a.backend_id, a.prompt_kind, a.annotator_id, str(a.n_cells), f"{a.mean:.4f}",
                 f"{a.ci95.lo:.4f}", f"{a.ci95.hi:.4f}", f"{a.fraction_acceptable:.4f}",
                 "BELOW THRESHOLD" if a.below_threshold else "ok"] for a in aggs]
        print(render_text(["backend_id", "prompt_kind", "annotator", "n", "mean", "ci95_lo",
                           "ci95_hi", f"frac>={args.threshold:g}", "status"], rows), end="")
        return 0
    if cmd == "costs":
        rows = run_cost_report(store.completions.values(), store.backends)
        print(render_text(["backend_id", "calls", "input_tokens", "output_tokens", "cost", "pricing"],
                          [[r.backend_id, str(r.calls), str(r.input_tokens), str(r.output_tokens),
                            r.cost_display, r.pricing] for r in rows]), end="")
        return 0
    if cmd == "report":
        formats = [f.strip() for f in args.formats.split(",") if f.strip()]
        metrics = compute_metrics(store, _embedder(store, args.provider))
        report = build_report(store, metrics, _annotations(store, args.annotations))
        for path in emit(report, args.out, formats, header_timestamp=not args.no_header_timestamp):
            print(path)
        return 0
    raise ValidationError(f"unknown subcommand {cmd!r}")


def _report_status(store, strict: bool = False) -> int:
    """Print cell counts; with ``strict`` a run that left failed cells exits 2."""
    rows = store.summary()
    print(render_text(["backend_id", "prompt_kind", "expected", "ok", "failed", "missing"],
                      [[r["backend_id"], r["prompt_kind"], str(r["expected"]), str(r["ok"]),
                        str(r["failed"]), str(r["missing"])] for r in rows]), end="")
    failed = sum(r["failed"] + r["missing"] for r in rows)
    if strict and failed:
        print(f"error: {failed} cells failed; see failures.log, then resume", file=sys.stderr)
        return 2
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return dispatch(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (TopicLabelError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
