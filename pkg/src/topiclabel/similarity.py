"""Label embeddings and cosine-similarity aggregates.

Two providers:

* ``http_embeddings``: an OpenAI-style ``/embeddings`` endpoint
  (request ``{"model", "input": [...]}``, response ``{"data": [{"embedding": [...]}, ...]}``).
  Serve ``paraphrase-multilingual-MiniLM-L12-v2`` behind one to replicate the
  original setup.
* ``hash_embedder``: dependency-free character-trigram hashing. Each text is
  padded to ``" " + text + " "``, every character trigram is hashed with 64-bit
  FNV-1a over its UTF-8 bytes, counts are accumulated in ``hash % dim`` buckets
  and the vector is L2-normalized.

All sums use :func:`math.fsum` so aggregates are correctly rounded and do not
depend on summation order.
"""

from __future__ import annotations

import json
import logging
import math
import os
import threading
from dataclasses import asdict, dataclass, fields
from itertools import combinations
from pathlib import Path
from typing import Iterable, Sequence

import httpx
import numpy as np

from topiclabel.errors import ProviderError, ValidationError

logger = logging.getLogger(__name__)

DEFAULT_EMBEDDING_MODEL = "paraphrase-multilingual-MiniLM-L12-v2"
CACHE_FORMAT = "topiclabel-embedding-cache"
CACHE_VERSION = 1

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1


@dataclass(frozen=True)
class EmbeddingProviderSpec:
    id: str = "hash"
    kind: str = "hash_embedder"
    endpoint: str = ""
    model_name: str = DEFAULT_EMBEDDING_MODEL
    dim: int = 256
    cache_path: str | None = None
    api_key_env: str = ""
    timeout_ms: int = 60_000
    batch_size: int = 64

    def __post_init__(self) -> None:
        if self.kind not in ("http_embeddings", "hash_embedder"):
            raise ValidationError(f"provider {self.id}: unknown kind {self.kind!r}")
        if self.kind == "hash_embedder" and self.dim < 8:
            raise ValidationError(f"provider {self.id}: hash embedder dim must be >= 8")
        if self.kind == "http_embeddings" and not self.endpoint:
            raise ValidationError(f"provider {self.id}: endpoint required")

    @property
    def identity(self) -> str:
        if self.kind == "hash_embedder":
            return f"hash_embedder/fnv1a64-trigram/dim={self.dim}"
        return f"http_embeddings/{self.endpoint}/{self.model_name}"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EmbeddingProviderSpec":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValidationError(f"provider: unknown fields {sorted(unknown)}")
        return cls(**d)


HASH_PROVIDER = EmbeddingProviderSpec()


def fnv1a64(data: bytes) -> int:
    h = _FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * _FNV_PRIME) & _MASK64
    return h


def hash_embed(text: str, dim: int = 256) -> np.ndarray:
    padded = f" {text} "
    counts = np.zeros(dim, dtype=np.float64)
    for i in range(len(padded) - 2):
        counts[fnv1a64(padded[i:i + 3].encode("utf-8")) % dim] += 1.0
    return counts / math.sqrt(math.fsum(counts * counts))


def cosine(a, b) -> float:
    """Cosine similarity, clamped to [-1, 1]."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValidationError(f"dimension mismatch: {a.shape} vs {b.shape}")
    na = math.sqrt(math.fsum(a * a))
    nb = math.sqrt(math.fsum(b * b))
    if na == 0.0 or nb == 0.0:
        raise ValidationError("zero-norm vector")
    if np.array_equal(a, b):
        return 1.0
    return min(1.0, max(-1.0, math.fsum(a * b) / (na * nb)))


class Embedder:
    """Caching embedding client for one provider.

    Vectors are unit-normalized on the way in. Equal texts embed once; the
    optional on-disk cache survives across processes.
    """

    def __init__(self, spec: EmbeddingProviderSpec = HASH_PROVIDER, *,
                 client: httpx.Client | None = None, env=None):
        self.spec = spec
        self._client = client
        self._env = os.environ if env is None else env
        self._vectors: dict[str, np.ndarray] = {}
        self._pairs: dict[tuple[str, str], float] = {}
        self._lock = threading.Lock()
        self._dim: int | None = None
        self.provider_calls = 0
        if spec.cache_path:
            self._load_cache(Path(spec.cache_path))

    def _load_cache(self, path: Path) -> None:
        if not path.exists():
            return
        with path.open(encoding="utf-8") as fh:
            header = fh.readline()
            try:
                meta = json.loads(header)
            except json.JSONDecodeError:
                meta = {}
            if meta.get("format") != CACHE_FORMAT or meta.get("version") != CACHE_VERSION:
                logger.warning("ignoring embedding cache %s with unknown header", path)
                return
            for line in fh:
                try:
                    rec = json.loads(line)
                except json.JSONDecodeError:
                    continue
                if rec.get("provider") == self.spec.identity:
                    self._vectors[rec["text"]] = np.asarray(rec["vector"], dtype=np.float64)

    def _append_cache(self, items: Iterable[tuple[str, np.ndarray]]) -> None:
        path = Path(self.spec.cache_path)
        new = not path.exists()
        with path.open("a", encoding="utf-8") as fh:
            if new:
                fh.write(json.dumps({"format": CACHE_FORMAT, "version": CACHE_VERSION}) + "\n")
            for text, vec in items:
                fh.write(json.dumps({"provider": self.spec.identity, "text": text,
                                     "vector": vec.tolist()}, ensure_ascii=False) + "\n")

    def _check(self, vec: np.ndarray, text: str) -> np.ndarray:
        if vec.ndim != 1 or vec.size == 0 or not np.all(np.isfinite(vec)):
            raise ProviderError(f"provider {self.spec.id}: bad vector for {text!r}")
        norm = math.sqrt(math.fsum(vec * vec))
        if norm == 0.0:
            raise ProviderError(f"provider {self.spec.id}: zero vector for {text!r}")
        if self._dim is None:
            self._dim = vec.size
        elif vec.size != self._dim:
            raise ProviderError(f"provider {self.spec.id}: inconsistent dimension {vec.size}")
        return vec / norm

    def _fetch(self, texts: list[str]) -> list[np.ndarray]:
        self.provider_calls += 1
        if self.spec.kind == "hash_embedder":
            return [hash_embed(t, self.spec.dim) for t in texts]
        headers = {"Content-Type": "application/json"}
        if self.spec.api_key_env:
            key = self._env.get(self.spec.api_key_env)
            if not key:
                raise ProviderError(f"environment variable {self.spec.api_key_env} not set")
            headers["Authorization"] = f"Bearer {key}"
        client = self._client or httpx.Client()
        try:
            resp = client.post(self.spec.endpoint, headers=headers,
                               json={"model": self.spec.model_name, "input": texts},
                               timeout=self.spec.timeout_ms / 1000.0)
            resp.raise_for_status()
            data = sorted(resp.json()["data"], key=lambda d: d.get("index", 0))
            vectors = [np.asarray(d["embedding"], dtype=np.float64) for d in data]
        except (httpx.HTTPError, ValueError, KeyError, TypeError) as exc:
            raise ProviderError(f"provider {self.spec.id} unreachable or malformed: {exc}") from None
        finally:
            if self._client is None:
                client.close()
        if len(vectors) != len(texts):
            raise ProviderError(f"provider {self.spec.id}: expected {len(texts)} vectors, got {len(vectors)}")
        return vectors

    def embed_many(self, texts: Iterable[str]) -> dict[str, np.ndarray]:
        wanted = list(dict.fromkeys(texts))
        if any(not t for t in wanted):
            raise ValidationError("cannot embed empty text")
        with self._lock:
            missing = [t for t in wanted if t not in self._vectors]
            fresh = []
            step = max(1, self.spec.batch_size)
            for i in range(0, len(missing), step):
                batch = missing[i:i + step]
                for text, vec in zip(batch, self._fetch(batch)):
                    vec = self._check(vec, text)
                    self._vectors[text] = vec
                    fresh.append((text, vec))
            if fresh and self.spec.cache_path:
                self._append_cache(fresh)
            return {t: self._vectors[t] for t in wanted}

    def embed(self, text: str) -> np.ndarray:
        return self.embed_many([text])[text]

    def similarity(self, a: str, b: str) -> float:
        """Cosine similarity of two label texts (memoized per unordered pair)."""
        if a == b:
            return 1.0
        key = (a, b) if a < b else (b, a)
        val = self._pairs.get(key)
        if val is None:
            vecs = self.embed_many(key)
            val = cosine(vecs[key[0]], vecs[key[1]])
            self._pairs[key] = val
        return val


def within_group_mean(labels: Sequence[str], embedder: Embedder) -> float:
    """Mean cosine over all unordered pairs of distinct positions (no self-pairs)."""
    if len(labels) < 2:
        raise ValidationError("within-group similarity needs at least 2 labels")
    embedder.embed_many(labels)
    sims = [embedder.similarity(a, b) for a, b in combinations(labels, 2)]
    return math.fsum(sims) / len(sims)


def cross_group_mean(group_a: Sequence[str], group_b: Sequence[str], embedder: Embedder) -> float:
    """Mean cosine over every (a, b) combination drawn from the two groups."""
    if not group_a or not group_b:
        raise ValidationError("cross-group similarity needs two non-empty groups")
    embedder.embed_many(list(group_a) + list(group_b))
    sims = [embedder.similarity(a, b) for a in group_a for b in group_b]
    return math.fsum(sims) / len(sims)
