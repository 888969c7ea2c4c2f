import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from topiclabel.errors import ProviderError, ValidationError
from topiclabel.similarity import (
    Embedder,
    EmbeddingProviderSpec,
    cosine,
    cross_group_mean,
    fnv1a64,
    hash_embed,
    within_group_mean,
)


def test_fnv1a_reference_values():
    # published FNV-1a 64-bit test vectors
    assert fnv1a64(b"") == 0xCBF29CE484222325
    assert fnv1a64(b"a") == 0xAF63DC4C8601EC8C
    assert fnv1a64(b"foobar") == 0x85944171F73967E8


def test_hash_embed_trigrams_by_hand():
    dim = 64
    expected = np.zeros(dim)
    for tri in (" ca", "car", "arb", "rbo", "bon", "on "):
        expected[fnv1a64(tri.encode()) % dim] += 1
    expected /= np.linalg.norm(expected)
    assert np.allclose(hash_embed("carbon", dim), expected, atol=1e-15)


def test_embed_deterministic_and_distinct():
    e = Embedder()
    a, b = e.embed("carbon"), Embedder().embed("carbon")
    assert np.array_equal(a, b)
    c = e.embed("nitrogen")
    assert not np.array_equal(a, c)
    for v in (a, c):
        assert math.isclose(float(np.linalg.norm(v)), 1.0, abs_tol=1e-12)
    with pytest.raises(ValidationError):
        e.embed("")


def test_hash_dim_floor():
    with pytest.raises(ValidationError):
        EmbeddingProviderSpec(dim=4)


@pytest.mark.parametrize("a,b,expected", [
    ((1, 2, 3), (1, 2, 3), 1.0),
    ((1, 0), (0, 1), 0.0),
    ((1, 1, 0), (1, 0, 0), 1 / math.sqrt(2)),
    ((1, 0), (-2, 0), -1.0),
])
def test_cosine_examples(a, b, expected):
    assert cosine(a, b) == pytest.approx(expected, abs=1e-12)


def test_cosine_errors():
    with pytest.raises(ValidationError, match="dimension"):
        cosine((1, 0), (1, 0, 0))
    with pytest.raises(ValidationError, match="zero"):
        cosine((0, 0), (1, 0))


vec = st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=3, max_size=3).filter(
    lambda v: math.sqrt(sum(x * x for x in v)) > 1e-3)


@given(vec, vec, st.floats(1e-3, 1e3))
def test_cosine_properties(a, b, lam):
    assert abs(cosine(a, a) - 1.0) <= 1e-12
    assert -1.0 <= cosine(a, b) <= 1.0
    assert cosine(a, b) == cosine(b, a)
    assert abs(cosine([lam * x for x in a], b) - cosine(a, b)) <= 1e-12


def test_within_group():
    e = Embedder()
    assert within_group_mean(["soil ecosystems"] * 20, e) == 1.0
    assert within_group_mean(["a", "b"], e) == cosine(e.embed("a"), e.embed("b"))
    with pytest.raises(ValidationError):
        within_group_mean(["a"], e)


def test_within_group_two_thirds():
    # two identical labels and one at 60 degrees: pairwise cosines {1, .5, .5}
    class Fixed(Embedder):
        def _fetch(self, texts):
            table = {"x": np.array([1.0, 0.0]), "y": np.array([0.5, math.sqrt(3) / 2])}
            return [table[t] for t in texts]

    e = Fixed(EmbeddingProviderSpec(dim=8))
    assert within_group_mean(["x", "x", "y"], e) == pytest.approx(2 / 3, abs=1e-15)


def test_cross_group():
    e = Embedder()
    assert cross_group_mean(["carbon"] * 20, ["carbon"] * 20, e) == 1.0
    assert cross_group_mean(["a"], ["b"], e) == cosine(e.embed("a"), e.embed("b"))
    A, B = ["soil", "soil fauna", "earthworm"], ["soil ecosystems", "fungi"]
    assert cross_group_mean(A, B, e) == cross_group_mean(B, A, e)
    with pytest.raises(ValidationError):
        cross_group_mean([], ["a"], e)


def test_cache_transparency(tmp_path):
    spec = EmbeddingProviderSpec(cache_path=str(tmp_path / "emb.cache"))
    labels = ["carbon cycle", "soil", "carbon", "soil"]
    cold = Embedder(spec)
    v_cold = cold.embed_many(labels)
    assert cold.provider_calls == 1
    warm = Embedder(spec)
    v_warm = warm.embed_many(labels)
    assert warm.provider_calls == 0
    assert all(np.array_equal(v_cold[k], v_warm[k]) for k in v_cold)
    assert within_group_mean(labels, cold) == within_group_mean(labels, warm)
    # a different provider identity ignores the cache
    other = Embedder(EmbeddingProviderSpec(dim=128, cache_path=spec.cache_path))
    other.embed("soil")
    assert other.provider_calls == 1


def test_http_embeddings(fake_server):
    srv = fake_server()
    spec = EmbeddingProviderSpec(id="minilm", kind="http_embeddings", endpoint=srv.url + "/embeddings",
                                 batch_size=2)
    e = Embedder(spec)
    vecs = e.embed_many(["soil", "carbon", "soil", "fungi"])
    assert len(vecs) == 3 and e.provider_calls == 2
    path, body, _ = srv.requests[0]
    assert body == {"model": "paraphrase-multilingual-MiniLM-L12-v2", "input": ["soil", "carbon"]}
    assert math.isclose(float(np.linalg.norm(vecs["fungi"])), 1.0, abs_tol=1e-12)


def test_http_embeddings_unreachable():
    spec = EmbeddingProviderSpec(id="x", kind="http_embeddings", endpoint="http://127.0.0.1:9/embeddings",
                                 timeout_ms=500)
    with pytest.raises(ProviderError):
        Embedder(spec).embed("soil")
