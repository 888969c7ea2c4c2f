"""Quantitative label metrics: distinctness, stability, similarity matrix.

All functions take a flat sequence of :class:`~topiclabel.prompts.LabelRecord`
(successful cells only; failed cells are simply absent) and work on
``normalized_label``.
"""

from __future__ import annotations

import math
import statistics
import warnings
from collections import defaultdict
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

from scipy import stats

from topiclabel.errors import ValidationError
from topiclabel.prompts import LabelRecord
from topiclabel.similarity import Embedder, cross_group_mean, within_group_mean

Group = tuple[str, str]


class DegenerateIntervalWarning(UserWarning):
    """A single-sample confidence interval (df = 0) was requested."""


class Interval(NamedTuple):
    lo: float
    hi: float


def t_quantile_975(df: int) -> float:
    """Two-sided 95% Student-t critical value, via the inverse regularized incomplete beta."""
    return float(stats.t.ppf(0.975, df))


def confidence_interval_95(samples: Sequence[float]) -> Interval:
    """Student-t interval ``mean ± t(0.975, n-1) * s / sqrt(n)``.

    For one sample returns ``(x, x)`` and emits :class:`DegenerateIntervalWarning`.
    """
    xs = [float(x) for x in samples]
    if not xs:
        raise ValidationError("confidence interval of an empty sample")
    mean = math.fsum(xs) / len(xs)
    if len(xs) == 1:
        warnings.warn("single sample: confidence interval is degenerate (df=0)",
                      DegenerateIntervalWarning, stacklevel=2)
        return Interval(mean, mean)
    s = statistics.stdev(xs)
    if s == 0.0:
        return Interval(mean, mean)
    half = t_quantile_975(len(xs) - 1) * s / math.sqrt(len(xs))
    return Interval(mean - half, mean + half)


def mean_ci(values: Sequence[int]) -> tuple[float, Interval, bool]:
    mean = math.fsum(values) / len(values)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateIntervalWarning)
        ci = confidence_interval_95(values)
    return mean, ci, len(values) == 1


def _select(labels: Sequence[LabelRecord], backend_id: str, prompt_kind: str) -> list[LabelRecord]:
    return [r for r in labels if r.backend_id == backend_id and r.prompt_kind == prompt_kind]


def groups_of(labels: Sequence[LabelRecord]) -> list[Group]:
    return sorted({r.group for r in labels})


def distinct_labels_per_iteration(labels: Sequence[LabelRecord], backend_id: str,
                                  prompt_kind: str, iteration: int) -> int:
    found = {r.normalized_label for r in _select(labels, backend_id, prompt_kind)
             if r.iteration == iteration}
    if not found:
        raise ValidationError(f"no labels for {backend_id}/{prompt_kind} iteration {iteration}")
    return len(found)


def pooled_distinct_labels(labels: Sequence[LabelRecord], backend_id: str, prompt_kind: str) -> int:
    """Unique labels across every topic and iteration of one group."""
    return len({r.normalized_label for r in _select(labels, backend_id, prompt_kind)})


def stability_per_topic(labels: Sequence[LabelRecord], backend_id: str, prompt_kind: str,
                        topic_id: int) -> int:
    found = {r.normalized_label for r in _select(labels, backend_id, prompt_kind)
             if r.topic_id == topic_id}
    if not found:
        raise ValidationError(f"no labels for {backend_id}/{prompt_kind} topic {topic_id}")
    return len(found)


@dataclass(frozen=True)
class DistinctLabelStat:
    backend_id: str
    prompt_kind: str
    iterations: list[int]
    per_iteration_counts: list[int]
    mean: float
    ci95: Interval
    pooled_unique: int
    degenerate_ci: bool = False


@dataclass(frozen=True)
class StabilityStat:
    backend_id: str
    prompt_kind: str
    topic_ids: list[int]
    per_topic_counts: list[int]
    mean: float
    ci95: Interval
    degenerate_ci: bool = False


def distinct_label_stat(labels: Sequence[LabelRecord], backend_id: str,
                        prompt_kind: str) -> DistinctLabelStat:
    by_iter: dict[int, set[str]] = defaultdict(set)
    for r in _select(labels, backend_id, prompt_kind):
        by_iter[r.iteration].add(r.normalized_label)
    if not by_iter:
        raise ValidationError(f"no iterations for {backend_id}/{prompt_kind}")
    iters = sorted(by_iter)
    counts = [len(by_iter[i]) for i in iters]
    mean, ci, degenerate = mean_ci(counts)
    return DistinctLabelStat(backend_id, prompt_kind, iters, counts, mean, ci,
                             pooled_distinct_labels(labels, backend_id, prompt_kind), degenerate)


def stability_stat(labels: Sequence[LabelRecord], backend_id: str, prompt_kind: str) -> StabilityStat:
    by_topic: dict[int, set[str]] = defaultdict(set)
    for r in _select(labels, backend_id, prompt_kind):
        by_topic[r.topic_id].add(r.normalized_label)
    if not by_topic:
        raise ValidationError(f"no labels for {backend_id}/{prompt_kind}")
    topics = sorted(by_topic)
    counts = [len(by_topic[t]) for t in topics]
    mean, ci, degenerate = mean_ci(counts)
    return StabilityStat(backend_id, prompt_kind, topics, counts, mean, ci, degenerate)


@dataclass(frozen=True)
class SimilarityMatrix:
    axis: list[Group]
    values: list[list[float | None]]
    # topics contributing to each cell, same shape as values
    topic_counts: list[list[int]] = field(default_factory=list)

    def entry(self, g: Group, h: Group) -> float | None:
        return self.values[self.axis.index(g)][self.axis.index(h)]


def similarity_matrix(labels: Sequence[LabelRecord], embedder: Embedder,
                      axis: Sequence[Group] | None = None) -> SimilarityMatrix:
    """Per-topic similarity averaged over topics, for every pair of groups.

    Diagonal cells use :func:`within_group_mean` (topics with a single label in
    the group are skipped); off-diagonal cells use :func:`cross_group_mean`
    over topics labelled by both groups. Cells with no eligible topic are None.
    """
    axis = sorted(axis) if axis is not None else groups_of(labels)
    if not axis:
        raise ValidationError("no label groups to compare")
    per: dict[Group, dict[int, list[str]]] = {g: defaultdict(list) for g in axis}
    for r in labels:
        if r.group in per:
            per[r.group][r.topic_id].append(r.normalized_label)
    for g in axis:
        if not per[g]:
            raise ValidationError(f"group {g[0]}/{g[1]} has no labels")
    embedder.embed_many(r.normalized_label for r in labels if r.group in per)

    n = len(axis)
    values: list[list[float | None]] = [[None] * n for _ in range(n)]
    counts = [[0] * n for _ in range(n)]
    for i in range(n):
        for j in range(i, n):
            a, b = per[axis[i]], per[axis[j]]
            topic_vals = []
            for t in sorted(set(a) & set(b)):
                if i == j:
                    if len(a[t]) >= 2:
                        topic_vals.append(within_group_mean(a[t], embedder))
                else:
                    topic_vals.append(cross_group_mean(a[t], b[t], embedder))
            if topic_vals:
                values[i][j] = values[j][i] = math.fsum(topic_vals) / len(topic_vals)
            counts[i][j] = counts[j][i] = len(topic_vals)
    return SimilarityMatrix(list(axis), values, counts)
