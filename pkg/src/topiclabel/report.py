"""Assemble and write the evaluation report.

Sections and their files (``<section>.csv`` / ``.json`` / ``.txt``):

* ``fig1a``  distinct labels per iteration, per backend x prompt
* ``fig1b``  distinct labels per topic (stability), per backend x prompt
* ``fig1c``  label similarity matrix between backend x prompt groups
* ``fig1d``  human accuracy scores, per backend x prompt
* ``costs``  token and USD totals per backend

CSV files hold data only. Text and JSON files carry a one-line header with the
run identity and, unless suppressed, the generation time; section bodies never
contain timestamps, so regenerating from the same inputs is byte-identical.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Sequence

from topiclabel.annotate import ScoreAggregate, aggregate_scores
from topiclabel.errors import ValidationError
from topiclabel.gateway import CostRow, run_cost_report
from topiclabel.metrics import (
    DistinctLabelStat,
    SimilarityMatrix,
    StabilityStat,
    distinct_label_stat,
    similarity_matrix,
    stability_stat,
)
from topiclabel.runner import RunStore
from topiclabel.similarity import Embedder

SECTIONS = ("fig1a", "fig1b", "fig1c", "fig1d", "costs")
FORMATS = ("table_text", "csv", "json")
_EXT = {"table_text": "txt", "csv": "csv", "json": "json"}


def group_name(g: Sequence[str]) -> str:
    return f"{g[0]}/{g[1]}"


@dataclass
class QuantitativeMetrics:
    groups: list[tuple[str, str]]
    distinct: list[DistinctLabelStat]
    stability: list[StabilityStat]
    similarity: SimilarityMatrix | None
    coverage: dict[tuple[str, str], tuple[int, int]]
    notes: list[str] = field(default_factory=list)


def compute_metrics(store: RunStore, embedder: Embedder | None) -> QuantitativeMetrics:
    """Distinctness, stability and (if an embedder is given) similarity for every group."""
    groups = sorted({(b.id, k) for b in store.backends for k in store.prompt_kinds})
    coverage = {(r["backend_id"], r["prompt_kind"]): (r["ok"], r["expected"])
                for r in store.summary()}
    present = {r.group for r in store.labels}
    notes = []
    distinct, stability = [], []
    for g in groups:
        ok, expected = coverage[g]
        if ok < expected:
            notes.append(f"{group_name(g)}: coverage {ok}/{expected} cells; failed or missing "
                         "cells are excluded from every statistic")
        if g not in present:
            notes.append(f"{group_name(g)}: no labels, group omitted")
            continue
        d = distinct_label_stat(store.labels, *g)
        s = stability_stat(store.labels, *g)
        if d.degenerate_ci:
            notes.append(f"{group_name(g)}: single iteration, distinct-label CI degenerate (df=0)")
        distinct.append(d)
        stability.append(s)
    sim = None
    if embedder is not None and present:
        axis = [g for g in groups if g in present]
        sim = similarity_matrix(store.labels, embedder, axis)
        n_topics = len(store.topics)
        for i, g in enumerate(sim.axis):
            used = sim.topic_counts[i][i]
            if used < n_topics:
                notes.append(f"{group_name(g)}: diagonal similarity averaged over {used}/{n_topics} "
                             "topics (topics with fewer than 2 labels excluded)")
    return QuantitativeMetrics(groups, distinct, stability, sim, coverage, notes)


@dataclass
class MetricReport:
    run_id: str
    metrics: QuantitativeMetrics
    scores: list[ScoreAggregate]
    scores_reason: str | None
    costs: list[CostRow]


def run_identity(store: RunStore) -> str:
    snap = json.dumps(store.snapshot, sort_keys=True).encode("utf-8")
    return f"{store.run_dir.name}@{hashlib.sha256(snap).hexdigest()[:12]}"


def build_report(store: RunStore, metrics: QuantitativeMetrics, annotations=None,
                 costs: list[CostRow] | None = None) -> MetricReport:
    annotations = list(annotations or [])
    if annotations:
        scores, reason = aggregate_scores(annotations, per_annotator=True), None
    else:
        scores, reason = [], "no annotations"
    if costs is None:
        costs = run_cost_report(store.completions.values(), store.backends)
    return MetricReport(run_identity(store), metrics, scores, reason, costs)


def _f(x: float | None, digits: int = 6) -> str:
    return "" if x is None else f"{x:.{digits}f}"


def section_tables(report: MetricReport) -> dict[str, tuple[list[str], list[list[str]], list[str]]]:
    """Section name -> (columns, rows, notes), all rendered to strings."""
    m = report.metrics
    out = {}

    rows = []
    for d in m.distinct:
        ok, expected = m.coverage[(d.backend_id, d.prompt_kind)]
        rows.append([d.backend_id, d.prompt_kind, _f(d.mean), _f(d.ci95.lo), _f(d.ci95.hi),
                     str(len(d.per_iteration_counts)), str(d.pooled_unique), str(ok), str(expected),
                     ";".join(map(str, d.per_iteration_counts))])
    out["fig1a"] = (["backend_id", "prompt_kind", "mean", "ci95_lo", "ci95_hi", "n_iterations",
                     "pooled_unique", "ok_cells", "expected_cells", "per_iteration_counts"],
                    rows, list(m.notes))

    rows = []
    for s in m.stability:
        ok, expected = m.coverage[(s.backend_id, s.prompt_kind)]
        rows.append([s.backend_id, s.prompt_kind, _f(s.mean), _f(s.ci95.lo), _f(s.ci95.hi),
                     str(len(s.per_topic_counts)), str(ok), str(expected)])
    out["fig1b"] = (["backend_id", "prompt_kind", "mean", "ci95_lo", "ci95_hi", "n_topics",
                     "ok_cells", "expected_cells"], rows, [])

    if m.similarity is None:
        out["fig1c"] = (["group"], [], ["no similarity provider"])
    else:
        names = [group_name(g) for g in m.similarity.axis]
        rows = [[names[i]] + [_f(v) for v in row] for i, row in enumerate(m.similarity.values)]
        out["fig1c"] = (["group"] + names, rows, [])

    rows = [[a.backend_id, a.prompt_kind, a.annotator_id, str(a.n_cells), _f(a.mean),
             _f(a.ci95.lo), _f(a.ci95.hi), _f(a.fraction_acceptable), str(a.below_threshold).lower()]
            for a in report.scores]
    out["fig1d"] = (["backend_id", "prompt_kind", "annotator_id", "n_cells", "mean", "ci95_lo",
                     "ci95_hi", "fraction_acceptable", "below_threshold"], rows,
                    [report.scores_reason] if report.scores_reason else [])

    rows = [[c.backend_id, c.kind, str(c.calls), str(c.input_tokens), str(c.output_tokens),
             str(c.estimated_tokens).lower(), _f(c.cost_usd, 4), c.cost_display, c.pricing]
            for c in report.costs]
    out["costs"] = (["backend_id", "kind", "calls", "input_tokens", "output_tokens",
                     "estimated_tokens", "cost_usd", "cost", "pricing"], rows, [])
    return out


def render_text(columns: list[str], rows: list[list[str]], notes: Iterable[str] = ()) -> str:
    widths = [len(c) for c in columns]
    for r in rows:
        widths = [max(w, len(v)) for w, v in zip(widths, r)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(columns, widths)).rstrip(),
             "  ".join("-" * w for w in widths)]
    lines += ["  ".join(v.ljust(w) for v, w in zip(r, widths)).rstrip() for r in rows]
    lines += [f"note: {n}" for n in notes]
    return "\n".join(lines) + "\n"


def _header(report: MetricReport, timestamp: bool) -> dict:
    head = {"run": report.run_id}
    if timestamp:
        head["generated_at"] = datetime.now(timezone.utc).isoformat(timespec="seconds")
    return head


def emit(report: MetricReport, out_dir: str | Path, formats: Iterable[str],
         header_timestamp: bool = True) -> list[Path]:
    formats = list(dict.fromkeys(formats))
    if not formats:
        raise ValidationError("no formats requested")
    for f in formats:
        if f not in FORMATS:
            raise ValidationError(f"unknown format {f!r}; choose from {', '.join(FORMATS)}")
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ValidationError(f"cannot create output dir {out_dir}: {exc}") from None
    head = _header(report, header_timestamp)
    written = []
    for name, (cols, rows, notes) in section_tables(report).items():
        for fmt in formats:
            path = out_dir / f"{name}.{_EXT[fmt]}"
            if fmt == "csv":
                buf = io.StringIO()
                writer = csv.writer(buf, lineterminator="\n")
                writer.writerow(cols)
                writer.writerows(rows)
                text = buf.getvalue()
            elif fmt == "json":
                body = {"header": head, "section": name, "columns": cols,
                        "rows": [dict(zip(cols, r)) for r in rows], "notes": notes}
                text = json.dumps(body, indent=2, ensure_ascii=False) + "\n"
            else:
                text = "# " + " ".join(f"{k}={v}" for k, v in head.items()) + "\n"
                text += render_text(cols, rows, notes)
            try:
                path.write_text(text, encoding="utf-8")
            except OSError as exc:
                raise ValidationError(f"cannot write {path}: {exc}") from None
            written.append(path)
    return written
