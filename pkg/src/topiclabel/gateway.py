"""Completion backends behind one interface, with pacing, retry and cost metering.

Three backend kinds are supported:

* ``http_chat`` -- any OpenAI-compatible ``/chat/completions`` endpoint.
* ``local_command`` -- a subprocess reading the prompt on stdin and writing the
  completion on stdout (e.g. a wrapper around a local text2text model).
* ``mock`` -- deterministic test double built from the topic's own keywords.
"""

from __future__ import annotations

import hashlib
import logging
import math
import os
import random
import shlex
import subprocess
import threading
import time
from dataclasses import asdict, dataclass, field, fields
from datetime import datetime, timezone
from typing import Callable, NamedTuple

import httpx

from topiclabel.corpus import Topic
from topiclabel.errors import (
    AuthError,
    GatewayError,
    MalformedResponse,
    RetriesExhausted,
    ValidationError,
)

logger = logging.getLogger(__name__)

BACKEND_KINDS = ("http_chat", "local_command", "mock")
FREE_KINDS = ("mock", "local_command")

BACKOFF_BASE_S = 1.0
BACKOFF_FACTOR = 2.0
BACKOFF_CAP_S = 30.0


class CellKey(NamedTuple):
    backend_id: str
    prompt_kind: str
    iteration: int
    topic_id: int


@dataclass(frozen=True)
class BackendSpec:
    id: str
    kind: str
    endpoint_or_command: str = ""
    model_name: str = ""
    api_key_env: str = ""
    price_input_per_1m: float = 0.0
    price_output_per_1m: float = 0.0
    min_request_interval_ms: int = 0
    max_retries: int = 3
    timeout_ms: int = 60_000
    mock_seed: int | None = None
    mock_variants: int = 1
    # fixed per-call usage the mock reports; None means estimate from text
    mock_input_tokens: int | None = None
    mock_output_tokens: int | None = None
    # extra request body fields (temperature, max_tokens, ...)
    params: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.id:
            raise ValidationError("backend id must be non-empty")
        if self.kind not in BACKEND_KINDS:
            raise ValidationError(f"backend {self.id}: unknown kind {self.kind!r}")
        if self.price_input_per_1m < 0 or self.price_output_per_1m < 0:
            raise ValidationError(f"backend {self.id}: prices must be >= 0")
        if self.min_request_interval_ms < 0:
            raise ValidationError(f"backend {self.id}: min_request_interval_ms must be >= 0")
        if self.max_retries < 0:
            raise ValidationError(f"backend {self.id}: max_retries must be >= 0")
        if self.mock_variants < 1:
            raise ValidationError(f"backend {self.id}: mock_variants must be >= 1")
        if self.kind != "mock" and not self.endpoint_or_command:
            raise ValidationError(f"backend {self.id}: endpoint_or_command required for {self.kind}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "BackendSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"backend {d.get('id')!r}: unknown fields {sorted(unknown)}")
        return cls(**d)

    def with_seed(self, seed: int) -> "BackendSpec":
        if self.mock_seed is not None:
            return self
        return BackendSpec.from_dict({**self.to_dict(), "mock_seed": seed})


@dataclass(frozen=True)
class CompletionRecord:
    backend_id: str
    prompt_kind: str
    iteration: int
    topic_id: int
    prompt_text: str
    raw_response: str
    input_tokens: int
    output_tokens: int
    latency_ms: int
    attempts: int
    timestamp: str
    estimated_tokens: bool = False

    @property
    def key(self) -> CellKey:
        return CellKey(self.backend_id, self.prompt_kind, self.iteration, self.topic_id)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "CompletionRecord":
        return cls(**d)


def estimate_tokens(text: str) -> int:
    return math.ceil(len(text) / 4)


class PacingGate:
    """Serializes dispatch so consecutive requests are at least ``interval_s`` apart."""

    def __init__(self, interval_s: float, clock: Callable[[], float] = time.monotonic,
                 sleep: Callable[[float], None] = time.sleep):
        self.interval_s = interval_s
        self._clock = clock
        self._sleep = sleep
        self._last: float | None = None
        self._lock = threading.Lock()
        self.dispatches: list[float] = []

    def wait(self) -> float:
        with self._lock:
            now = self._clock()
            if self._last is not None and self.interval_s > 0:
                ready = self._last + self.interval_s
                while now < ready:
                    self._sleep(ready - now)
                    now = self._clock()
            self._last = now
            self.dispatches.append(now)
            return now


def mock_variant(spec: BackendSpec, topic: Topic, prompt_kind: str, iteration: int) -> int:
    seed = spec.mock_seed if spec.mock_seed is not None else 0
    material = f"{seed}|{topic.id}|{prompt_kind}|{iteration}|{'|'.join(topic.keywords)}"
    digest = hashlib.sha256(material.encode("utf-8")).digest()
    return random.Random(int.from_bytes(digest[:8], "big")).randrange(spec.mock_variants)


def mock_complete(spec: BackendSpec, topic: Topic, prompt_kind: str, iteration: int) -> str:
    kws = topic.keywords
    start = mock_variant(spec, topic, prompt_kind, iteration) % len(kws)
    if prompt_kind == "short":
        return "topic: " + kws[start]
    picked = [kws[(start + i) % len(kws)] for i in range(min(3, len(kws)))]
    return "topic: " + " ".join(picked)


class _Transient(Exception):
    pass


class Gateway:
    """Per-backend completion client. Thread-safe; dispatch is paced per instance."""

    def __init__(self, spec: BackendSpec, *, client: httpx.Client | None = None,
                 gate: PacingGate | None = None, sleep: Callable[[float], None] = time.sleep,
                 rng: random.Random | None = None, env=None):
        self.spec = spec
        self._sleep = sleep
        self._rng = rng or random.Random(0)
        self._env = os.environ if env is None else env
        self.gate = gate or PacingGate(spec.min_request_interval_ms / 1000.0, sleep=sleep)
        self._client = client
        self._owns_client = False

    def close(self) -> None:
        if self._owns_client and self._client is not None:
            self._client.close()

    def backoff_delay(self, attempt: int) -> float:
        return self._rng.uniform(0, min(BACKOFF_CAP_S, BACKOFF_BASE_S * BACKOFF_FACTOR ** attempt))

    def complete(self, prompt: str, key: CellKey, topic: Topic | None = None) -> CompletionRecord:
        spec = self.spec
        if spec.kind == "mock" and topic is None:
            raise ValidationError("mock backend needs the topic")
        start = time.monotonic()
        last_exc: Exception | None = None
        for attempt in range(spec.max_retries + 1):
            self.gate.wait()
            try:
                text, usage = self._dispatch(prompt, key, topic)
            except _Transient as exc:
                last_exc = exc
                logger.warning("%s: transient failure on %s (attempt %d): %s",
                               spec.id, tuple(key), attempt + 1, exc)
                if attempt < spec.max_retries:
                    self._sleep(self.backoff_delay(attempt))
                continue
            estimated = usage is None
            if usage is None:
                usage = (estimate_tokens(prompt), estimate_tokens(text))
            return CompletionRecord(
                backend_id=key.backend_id,
                prompt_kind=key.prompt_kind,
                iteration=key.iteration,
                topic_id=key.topic_id,
                prompt_text=prompt,
                raw_response=text,
                input_tokens=usage[0],
                output_tokens=usage[1],
                latency_ms=int((time.monotonic() - start) * 1000),
                attempts=attempt + 1,
                timestamp=datetime.now(timezone.utc).isoformat(),
                estimated_tokens=estimated,
            )
        raise RetriesExhausted(
            f"{spec.id}: gave up after {spec.max_retries + 1} attempts: {last_exc}")

    def _dispatch(self, prompt: str, key: CellKey, topic: Topic | None):
        if self.spec.kind == "mock":
            return self._mock(key, topic)
        if self.spec.kind == "local_command":
            return self._local(prompt)
        return self._http(prompt)

    def _mock(self, key: CellKey, topic: Topic):
        text = mock_complete(self.spec, topic, key.prompt_kind, key.iteration)
        if self.spec.mock_input_tokens is None:
            return text, None
        return text, (self.spec.mock_input_tokens, self.spec.mock_output_tokens or 0)

    def _local(self, prompt: str):
        try:
            proc = subprocess.run(shlex.split(self.spec.endpoint_or_command), input=prompt,
                                  capture_output=True, text=True,
                                  timeout=self.spec.timeout_ms / 1000.0)
        except subprocess.TimeoutExpired as exc:
            raise _Transient(f"timeout: {exc}") from None
        except OSError as exc:
            raise GatewayError(f"{self.spec.id}: cannot start command: {exc}") from None
        if proc.returncode != 0:
            raise _Transient(f"exit status {proc.returncode}: {proc.stderr.strip()[:200]}")
        if not proc.stdout.strip():
            raise MalformedResponse(f"{self.spec.id}: command produced no output")
        return proc.stdout, None

    def _http(self, prompt: str):
        headers = {"Content-Type": "application/json"}
        if self.spec.api_key_env:
            key = self._env.get(self.spec.api_key_env)
            if not key:
                raise AuthError(f"{self.spec.id}: environment variable {self.spec.api_key_env} not set")
            headers["Authorization"] = f"Bearer {key}"
        body = {
            "model": self.spec.model_name,
            "messages": [{"role": "user", "content": prompt}],
            **self.spec.params,
        }
        if self._client is None:
            self._client = httpx.Client()
            self._owns_client = True
        try:
            resp = self._client.post(self.spec.endpoint_or_command, json=body, headers=headers,
                                     timeout=self.spec.timeout_ms / 1000.0)
        except httpx.TimeoutException as exc:
            raise _Transient(f"timeout: {exc}") from None
        except httpx.TransportError as exc:
            raise _Transient(f"transport error: {exc}") from None
        if resp.status_code in (401, 403):
            raise AuthError(f"{self.spec.id}: HTTP {resp.status_code} (check {self.spec.api_key_env})")
        if resp.status_code == 429 or resp.status_code >= 500:
            raise _Transient(f"HTTP {resp.status_code}")
        if resp.status_code >= 400:
            raise GatewayError(f"{self.spec.id}: HTTP {resp.status_code}: {resp.text[:200]}")
        try:
            payload = resp.json()
            text = payload["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError):
            raise MalformedResponse(f"{self.spec.id}: unexpected response shape") from None
        if not isinstance(text, str) or not text.strip():
            raise MalformedResponse(f"{self.spec.id}: response carried no text")
        usage = payload.get("usage") or {}
        if "prompt_tokens" in usage:
            return text, (int(usage["prompt_tokens"]), int(usage.get("completion_tokens", 0)))
        return text, None


def complete(spec: BackendSpec, prompt: str, key: CellKey, topic: Topic | None = None,
             **kwargs) -> CompletionRecord:
    """One-shot convenience wrapper around :class:`Gateway`."""
    gw = Gateway(spec, **kwargs)
    try:
        return gw.complete(prompt, key, topic)
    finally:
        gw.close()


def estimate_cost(input_tokens: int, output_tokens: int, spec: BackendSpec) -> float:
    """Exact USD cost; round only for display (see :func:`format_usd`)."""
    if input_tokens < 0 or output_tokens < 0:
        raise ValidationError("token counts must be >= 0")
    return (input_tokens * spec.price_input_per_1m / 1e6
            + output_tokens * spec.price_output_per_1m / 1e6)


def format_usd(amount: float) -> str:
    return f"${amount:.4f}"


def pricing_note(spec: BackendSpec) -> str:
    if spec.kind in FREE_KINDS:
        return "Free"
    note = f"${spec.price_input_per_1m:.3f} / 1M input tokens"
    if spec.price_output_per_1m:
        note += f", ${spec.price_output_per_1m:.3f} / 1M output tokens"
    return note


@dataclass(frozen=True)
class CostRow:
    backend_id: str
    kind: str
    calls: int
    input_tokens: int
    output_tokens: int
    estimated_tokens: bool
    cost_usd: float
    pricing: str

    @property
    def cost_display(self) -> str:
        return "Free" if self.pricing == "Free" else format_usd(self.cost_usd)


def run_cost_report(records, backends) -> list[CostRow]:
    """Per-backend token and USD totals, sorted by backend id.

    Mock and local-command backends are always free regardless of configured prices.
    """
    by_id = {b.id: b for b in backends}
    totals: dict[str, list] = {}
    for rec in records:
        if rec.backend_id not in by_id:
            raise ValidationError(f"unknown backend id {rec.backend_id!r} in records")
        t = totals.setdefault(rec.backend_id, [0, 0, 0, False])
        t[0] += 1
        t[1] += rec.input_tokens
        t[2] += rec.output_tokens
        t[3] = t[3] or rec.estimated_tokens
    rows = []
    for bid in sorted(totals):
        spec = by_id[bid]
        calls, tin, tout, est = totals[bid]
        cost = 0.0 if spec.kind in FREE_KINDS else estimate_cost(tin, tout, spec)
        rows.append(CostRow(bid, spec.kind, calls, tin, tout, est, cost, pricing_note(spec)))
    return rows
