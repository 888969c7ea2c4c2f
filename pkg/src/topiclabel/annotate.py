"""Human accuracy scoring of labels on a 1-5 rubric, and its aggregation."""

from __future__ import annotations

import csv
import math
import os
import sys
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import IO, Iterable, Sequence

from topiclabel.errors import ValidationError
from topiclabel.metrics import Interval, mean_ci
from topiclabel.prompts import LabelRecord

ACCEPTANCE_THRESHOLD = 3
ANNOTATIONS_FILE = "annotations.csv"
LOCK_FILE = "annotate.lock"
COLUMNS = ["backend_id", "prompt_kind", "topic_id", "label", "score", "annotator_id",
           "timestamp", "note"]


@dataclass(frozen=True)
class RubricLevel:
    score: int
    name: str
    description: str


RUBRIC: tuple[RubricLevel, ...] = (
    RubricLevel(1, "bad labelling", "Inadequate to identify the topic"),
    RubricLevel(2, "insufficient labelling",
                "Globally refers to the topic but is too generic to provide a distinct categorization"),
    RubricLevel(3, "acceptable labelling",
                "Indicative enough to identify the topic, but still lacking precision"),
    RubricLevel(4, "good labelling", "Depicts the topic with significant precision"),
    RubricLevel(5, "perfect labelling",
                "Very precisely describes the topics, outperforming labels with a score of 4"),
)


def rubric_text() -> str:
    return "\n".join(f"  {lvl.score}  {lvl.name:<24} {lvl.description}" for lvl in RUBRIC)


@dataclass(frozen=True)
class Annotation:
    backend_id: str
    prompt_kind: str
    topic_id: int
    label: str
    score: int
    annotator_id: str
    timestamp: str = ""
    note: str = ""

    def __post_init__(self) -> None:
        if isinstance(self.score, bool) or not isinstance(self.score, int) or not 1 <= self.score <= 5:
            raise ValidationError(f"score must be an integer in 1..5, got {self.score!r}")

    @property
    def cell(self) -> tuple[str, str, int, str]:
        return (self.backend_id, self.prompt_kind, self.topic_id, self.label)

    @property
    def key(self) -> tuple[str, str, int, str, str]:
        return self.cell + (self.annotator_id,)


def export_annotations(annotations: Iterable[Annotation], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=COLUMNS)
        writer.writeheader()
        for a in annotations:
            writer.writerow(asdict(a))


def import_annotations(path: str | Path) -> list[Annotation]:
    path = Path(path)
    if not path.is_file():
        return []
    out: list[Annotation] = []
    seen: set = set()
    with path.open(encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(COLUMNS[:6]) - set(reader.fieldnames or [])
        if missing:
            raise ValidationError(f"{path}: missing columns {sorted(missing)}")
        for lineno, row in enumerate(reader, 2):
            try:
                score = int(row["score"])
            except (TypeError, ValueError):
                raise ValidationError(f"{path}:{lineno}: non-integer score {row['score']!r}") from None
            try:
                topic_id = int(row["topic_id"])
            except (TypeError, ValueError):
                raise ValidationError(f"{path}:{lineno}: malformed row (topic_id)") from None
            try:
                ann = Annotation(row["backend_id"], row["prompt_kind"], topic_id, row["label"], score,
                                 row["annotator_id"], row.get("timestamp") or "", row.get("note") or "")
            except ValidationError as exc:
                raise ValidationError(f"{path}:{lineno}: {exc}") from None
            if ann.key in seen:
                raise ValidationError(f"{path}:{lineno}: duplicate annotation for cell "
                                      f"{ann.cell} by {ann.annotator_id}")
            seen.add(ann.key)
            out.append(ann)
    return out


def _append(path: Path, ann: Annotation) -> None:
    new = not path.exists() or path.stat().st_size == 0
    with path.open("a", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=COLUMNS)
        if new:
            writer.writeheader()
        writer.writerow(asdict(ann))


def sample_cells(labels: Sequence[LabelRecord], sampling: str = "modal") -> list[tuple[str, str, int, str]]:
    """Cells to present for scoring, as (backend, prompt, topic, label shown).

    ``modal``: one label per backend x prompt x topic, the most frequent
    normalized label across iterations (ties broken alphabetically).
    ``all``: every distinct normalized label produced for each backend x prompt x topic.
    """
    if sampling not in ("modal", "all"):
        raise ValidationError(f"unknown sampling mode {sampling!r}")
    by_group: dict[tuple[str, str, int], list[LabelRecord]] = defaultdict(list)
    for r in labels:
        by_group[(r.backend_id, r.prompt_kind, r.topic_id)].append(r)
    cells = []
    for g in sorted(by_group):
        recs = sorted(by_group[g], key=lambda r: r.iteration)
        counts = Counter(r.normalized_label for r in recs)
        if sampling == "modal":
            best = max(counts.values())
            chosen = [min(lbl for lbl, c in counts.items() if c == best)]
        else:
            chosen = sorted(counts)
        for lbl in chosen:
            cells.append(g + (lbl,))
    return cells


def annotate_session(labels: Sequence[LabelRecord], topics, run_dir: str | Path, annotator_id: str,
                     sampling: str = "modal", *, stdin: IO[str] | None = None,
                     stdout: IO[str] | None = None, interactive: bool | None = None) -> list[Annotation]:
    """Interactive scoring loop. Returns the annotations appended in this session.

    Input per cell: ``1``-``5`` to score, ``s`` to skip, ``q`` to stop. Cells this
    annotator already scored are not shown again. When ``stdin`` is not a TTY
    (and no explicit stream is given) the session refuses to start.
    """
    if not annotator_id:
        raise ValidationError("annotator id required")
    run_dir = Path(run_dir)
    if stdin is None:
        stdin = sys.stdin
        if interactive is None:
            interactive = stdin.isatty()
        if not interactive:
            raise ValidationError("non-interactive session: pass --input-file with scores")
    stdout = stdout or sys.stdout
    lock = run_dir / LOCK_FILE
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise ValidationError(f"another annotation session holds {lock}") from None
    os.close(fd)
    path = run_dir / ANNOTATIONS_FILE
    added: list[Annotation] = []
    try:
        done = {a.cell for a in import_annotations(path) if a.annotator_id == annotator_id}
        todo = [c for c in sample_cells(labels, sampling) if c not in done]
        print(f"{len(todo)} cells to score. Rubric:\n{rubric_text()}", file=stdout)
        for n, cell in enumerate(todo, 1):
            backend_id, kind, topic_id, label = cell
            print(f"\n[{n}/{len(todo)}] topic {topic_id} ({backend_id}, {kind})", file=stdout)
            print(f"  keywords: {', '.join(topics[topic_id].keywords)}", file=stdout)
            print(f"  label:    {label}", file=stdout)
            score = _ask(stdin, stdout)
            if score == "q":
                break
            if score == "s":
                continue
            ann = Annotation(backend_id, kind, topic_id, label, score, annotator_id,
                             datetime.now(timezone.utc).isoformat())
            _append(path, ann)
            added.append(ann)
    finally:
        lock.unlink(missing_ok=True)
    return added


def _ask(stdin: IO[str], stdout: IO[str]):
    while True:
        print("  score [1-5, s=skip, q=quit]: ", end="", file=stdout, flush=True)
        line = stdin.readline()
        if not line:
            return "q"
        answer = line.strip().lower()
        if answer in ("s", "q"):
            return answer
        if answer in {"1", "2", "3", "4", "5"}:
            return int(answer)
        print(f"  invalid score {answer!r}; enter an integer from 1 to 5", file=stdout)


@dataclass(frozen=True)
class ScoreAggregate:
    backend_id: str
    prompt_kind: str
    annotator_id: str  # "*" for the consensus aggregate
    n_cells: int
    mean: float
    ci95: Interval
    fraction_acceptable: float
    below_threshold: bool


def _aggregate(cell_scores: list[float], backend_id: str, prompt_kind: str, annotator: str,
               threshold: float) -> ScoreAggregate:
    if not cell_scores:
        raise ValidationError(f"no annotations for {backend_id}/{prompt_kind}")
    mean, ci, _ = mean_ci(cell_scores)
    frac = sum(1 for s in cell_scores if s >= threshold) / len(cell_scores)
    return ScoreAggregate(backend_id, prompt_kind, annotator, len(cell_scores), mean, ci, frac,
                          mean < threshold)


def aggregate_scores(annotations: Iterable[Annotation], threshold: float = ACCEPTANCE_THRESHOLD,
                     per_annotator: bool = False) -> list[ScoreAggregate]:
    """Mean, 95% CI and share of cells scoring >= threshold, per backend x prompt.

    Cells scored by several annotators count once, with the mean of their scores.
    With ``per_annotator`` each annotator's own aggregate is appended as well.
    """
    by_cell: dict[tuple, list[int]] = defaultdict(list)
    by_annotator: dict[tuple, list[int]] = defaultdict(list)
    for a in annotations:
        by_cell[a.cell].append(a.score)
        by_annotator[(a.backend_id, a.prompt_kind, a.annotator_id)].append(a.score)
    groups: dict[tuple[str, str], list[float]] = defaultdict(list)
    for cell in sorted(by_cell):
        scores = by_cell[cell]
        groups[cell[:2]].append(math.fsum(scores) / len(scores))
    out = [_aggregate(groups[g], g[0], g[1], "*", threshold) for g in sorted(groups)]
    if per_annotator:
        out += [_aggregate([float(s) for s in by_annotator[k]], k[0], k[1], k[2], threshold)
                for k in sorted(by_annotator)]
    return out


def check_references(annotations: Iterable[Annotation], labels: Sequence[LabelRecord]) -> list[str]:
    """Annotations whose cell does not match any label in the run."""
    known = {(r.backend_id, r.prompt_kind, r.topic_id, r.normalized_label) for r in labels}
    return [f"{a.cell} by {a.annotator_id}" for a in annotations if a.cell not in known]
