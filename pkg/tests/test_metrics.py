import math
import random
import warnings

import pytest
from hypothesis import given, settings, strategies as st

from topiclabel.errors import ValidationError
from topiclabel.metrics import (
    DegenerateIntervalWarning,
    confidence_interval_95,
    distinct_label_stat,
    distinct_labels_per_iteration,
    pooled_distinct_labels,
    similarity_matrix,
    stability_per_topic,
    stability_stat,
    t_quantile_975,
)
from topiclabel.prompts import LabelRecord
from topiclabel.similarity import Embedder


def lab(backend, kind, it, topic, label):
    return LabelRecord(backend, kind, it, topic, label, label, 1, True, False)


def t_pdf(x, df):
    c = math.gamma((df + 1) / 2) / (math.sqrt(df * math.pi) * math.gamma(df / 2))
    return c * (1 + x * x / df) ** (-(df + 1) / 2)


def t_cdf_simpson(x, df, n=4000):
    h = x / n
    s = t_pdf(0, df) + t_pdf(x, df)
    s += sum((4 if i % 2 else 2) * t_pdf(i * h, df) for i in range(1, n))
    return 0.5 + s * h / 3


def t_quantile_oracle(p, df):
    lo, hi = 0.0, 100.0
    for _ in range(60):
        mid = (lo + hi) / 2
        if t_cdf_simpson(mid, df) < p:
            lo = mid
        else:
            hi = mid
    return (lo + hi) / 2


@pytest.mark.parametrize("df,table", [(1, 12.706), (4, 2.776), (19, 2.093)])
def test_t_quantile_against_quadrature(df, table):
    assert t_quantile_975(df) == pytest.approx(table, abs=1e-3)
    assert t_quantile_975(df) == pytest.approx(t_quantile_oracle(0.975, df), abs=1e-4)


def test_ci_examples():
    lo, hi = confidence_interval_95([1, 2, 3, 4, 5])
    assert (lo, hi) == pytest.approx((1.037, 4.963), abs=1e-3)
    assert confidence_interval_95([5, 5, 5, 5]) == (5.0, 5.0)
    assert confidence_interval_95([104] * 20) == (104.0, 104.0)
    assert confidence_interval_95([0, 10]) == pytest.approx((-58.53, 68.53), abs=0.01)
    with pytest.warns(DegenerateIntervalWarning):
        assert confidence_interval_95([7]) == (7.0, 7.0)
    with pytest.raises(ValidationError):
        confidence_interval_95([])


@given(st.lists(st.integers(1, 104), min_size=1, max_size=30))
def test_ci_contains_mean(xs):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        lo, hi = confidence_interval_95(xs)
    mean = sum(xs) / len(xs)
    assert lo <= mean + 1e-9 and mean - 1e-9 <= hi


def test_distinct_examples():
    labels = [lab("b", "short", 0, t, "biology") for t in range(104)]
    assert distinct_labels_per_iteration(labels, "b", "short", 0) == 1
    labels = [lab("b", "short", 0, t, f"l{t}") for t in range(104)]
    assert distinct_labels_per_iteration(labels, "b", "short", 0) == 104
    labels = [lab("b", "short", 0, 1, "carbon"), lab("b", "short", 0, 2, "soil"), lab("b", "short", 0, 3, "carbon")]
    assert distinct_labels_per_iteration(labels, "b", "short", 0) == 2
    with pytest.raises(ValidationError):
        distinct_labels_per_iteration(labels, "b", "short", 9)


def test_distinct_stat():
    labels = []
    for it, n in enumerate([1, 2, 3, 4, 5]):
        labels += [lab("b", "long", it, t, f"x{t % n}") for t in range(5)]
    s = distinct_label_stat(labels, "b", "long")
    assert s.per_iteration_counts == [1, 2, 3, 4, 5] and s.mean == 3.0
    assert s.ci95 == pytest.approx((1.037, 4.963), abs=1e-3)
    assert s.pooled_unique == 5 == pooled_distinct_labels(labels, "b", "long")
    single = distinct_label_stat([lab("b", "long", 0, t, f"x{t}") for t in range(7)], "b", "long")
    assert single.mean == 7 and single.ci95 == (7, 7) and single.degenerate_ci


def test_stability_examples():
    same = [lab("b", "short", i, 1, "soil") for i in range(20)]
    assert stability_per_topic(same, "b", "short", 1) == 1
    distinct = [lab("b", "short", i, 1, f"s{i}") for i in range(20)]
    assert stability_per_topic(distinct, "b", "short", 1) == 20
    mixed = [lab("b", "long", 0, 1, "soil"), lab("b", "long", 1, 1, "soil fauna"), lab("b", "long", 2, 1, "soil")]
    assert stability_per_topic(mixed, "b", "long", 1) == 2
    assert stability_stat(mixed, "b", "long").per_topic_counts == [2]


def test_similarity_constant_is_all_ones():
    labels = [lab(b, k, i, t, "carbon") for b in ("x", "y") for k in ("short", "long")
              for i in range(3) for t in range(4)]
    m = similarity_matrix(labels, Embedder())
    assert m.values == [[1.0] * 4 for _ in range(4)]


def test_similarity_single_pair():
    e = Embedder()
    labels = [lab("x", "short", 0, 1, "a"), lab("y", "short", 0, 1, "b")]
    m = similarity_matrix(labels, e)
    assert m.entry(("x", "short"), ("y", "short")) == e.similarity("a", "b")
    assert m.values[0][0] is None and m.topic_counts[0][0] == 0


# ---------------------------------------------------------------------------
# exhaustive-enumeration oracle

def oracle_cos(u, v):
    u, v = [float(x) for x in u], [float(x) for x in v]
    if u == v:
        return 1.0
    dot = math.fsum(a * b for a, b in zip(u, v))
    nu = math.sqrt(math.fsum(a * a for a in u))
    nv = math.sqrt(math.fsum(b * b for b in v))
    return min(1.0, max(-1.0, dot / (nu * nv)))


def oracle(labels, embedder):
    groups = sorted({(r.backend_id, r.prompt_kind) for r in labels})
    topics = sorted({r.topic_id for r in labels})
    iters = sorted({r.iteration for r in labels})
    cell = {(r.backend_id, r.prompt_kind, r.iteration, r.topic_id): r.normalized_label for r in labels}
    distinct, stability, sim = {}, {}, {}
    for g in groups:
        for i in iters:
            seen = []
            for t in topics:
                lbl = cell.get(g + (i, t))
                if lbl is not None and lbl not in seen:
                    seen.append(lbl)
            if seen:
                distinct[g + (i,)] = len(seen)
        for t in topics:
            seen = []
            for i in iters:
                lbl = cell.get(g + (i, t))
                if lbl is not None and lbl not in seen:
                    seen.append(lbl)
            if seen:
                stability[g + (t,)] = len(seen)
    for gi, g in enumerate(groups):
        for h in groups[gi:]:
            per_topic = []
            for t in topics:
                a = [cell[g + (i, t)] for i in iters if g + (i, t) in cell]
                b = [cell[h + (i, t)] for i in iters if h + (i, t) in cell]
                terms = []
                if g == h:
                    for x in range(len(a)):
                        for y in range(x + 1, len(a)):
                            terms.append(oracle_cos(embedder.embed(a[x]), embedder.embed(a[y])))
                else:
                    for x in a:
                        for y in b:
                            terms.append(oracle_cos(embedder.embed(x), embedder.embed(y)))
                if terms:
                    per_topic.append(math.fsum(terms) / len(terms))
            sim[(g, h)] = sim[(h, g)] = math.fsum(per_topic) / len(per_topic) if per_topic else None
    return groups, distinct, stability, sim


VOCAB = ["carbon", "soil", "soil ecosystems", "carbon cycle in forests", "earthworm", "biology",
         "fungi", "soil fauna"]


def random_labels(rng):
    backends = ["b0", "b1"][: rng.randint(1, 2)]
    kinds = rng.sample(["short", "long"], rng.randint(1, 2))
    n_topics, n_iters = rng.randint(1, 3), rng.randint(1, 3)
    vocab = rng.sample(VOCAB, rng.randint(1, len(VOCAB)))
    labels = []
    for b in backends:
        for k in kinds:
            for i in range(n_iters):
                for t in range(n_topics):
                    if rng.random() < 0.15:
                        continue  # failed cell
                    labels.append(lab(b, k, i, t, rng.choice(vocab)))
    rng.shuffle(labels)
    return labels


def check_against_oracle(labels, embedder):
    groups, distinct, stability, sim = oracle(labels, embedder)
    for (b, k, i), n in distinct.items():
        assert distinct_labels_per_iteration(labels, b, k, i) == n
    for (b, k, t), n in stability.items():
        assert stability_per_topic(labels, b, k, t) == n
    if groups:
        m = similarity_matrix(labels, embedder)
        assert m.axis == groups
        for g in groups:
            for h in groups:
                assert m.entry(g, h) == sim[(g, h)]


def test_brute_force_equivalence_random_stores():
    embedder = Embedder()
    rng = random.Random(20240801)
    for _ in range(300):
        check_against_oracle(random_labels(rng), embedder)


@settings(max_examples=60, deadline=None)
@given(st.randoms(use_true_random=False))
def test_permutation_invariance(rnd):
    labels = random_labels(random.Random(rnd.random()))
    if not labels:
        return
    e = Embedder()
    shuffled = list(labels)
    rnd.shuffle(shuffled)
    # relabel topic and iteration ids by a permutation
    topics = sorted({r.topic_id for r in labels})
    perm = dict(zip(topics, rnd.sample(topics, len(topics))))
    moved = [LabelRecord(r.backend_id, r.prompt_kind, r.iteration, perm[r.topic_id], r.raw_label,
                         r.normalized_label, 1, True, False) for r in shuffled]
    a, b = similarity_matrix(labels, e), similarity_matrix(moved, e)
    assert a.values == b.values
    for g in a.axis:
        sa, sb = stability_stat(labels, *g), stability_stat(moved, *g)
        assert sorted(sa.per_topic_counts) == sorted(sb.per_topic_counts)
        assert distinct_label_stat(labels, *g).per_iteration_counts == \
            distinct_label_stat(moved, *g).per_iteration_counts
