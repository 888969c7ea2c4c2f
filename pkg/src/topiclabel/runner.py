"""Experiment grid execution with an append-only, resumable run directory.

Layout of a run directory::

    config.snapshot   JSON: resolved config (backends, prompts, seeds, topic hash)
    topics.jsonl      copy of the topic file the run was started with
    completions.log   one successful CompletionRecord per line, append-only
    failures.log      one failed-cell record per line, append-only
    labels.log        LabelRecords projected from completions, sorted by cell key
    status.json       cell -> ok/failed index (rebuilt from the logs on load)

A cell is one (backend, prompt kind, iteration, topic). Successful cells are
never rewritten; resuming only executes cells that are missing or failed.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import queue
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Iterable

import yaml

from topiclabel.corpus import TopicSet, load_topics, save_topics
from topiclabel.errors import (
    AuthError,
    ConfigMismatch,
    EmptyLabelError,
    GatewayError,
    ValidationError,
)
from topiclabel.gateway import BackendSpec, CellKey, CompletionRecord, Gateway
from topiclabel.prompts import (
    DEFAULT_CORPUS_DESCRIPTOR,
    PROMPT_KINDS,
    LabelRecord,
    PromptTemplate,
    builtin_template,
    label_record,
    load_template,
    render_prompt,
)
from topiclabel.similarity import EmbeddingProviderSpec

logger = logging.getLogger(__name__)

SNAPSHOT = "config.snapshot"
TOPICS = "topics.jsonl"
COMPLETIONS = "completions.log"
FAILURES = "failures.log"
LABELS = "labels.log"
STATUS = "status.json"
SNAPSHOT_VERSION = 1


@dataclass
class ExperimentConfig:
    topics_path: str
    backends: list[BackendSpec]
    run_dir: str
    prompt_kinds: list[str] = field(default_factory=lambda: list(PROMPT_KINDS))
    iterations: int = 20
    global_seed: int = 0
    max_parallel_backends: int = 1
    corpus_descriptor: str = DEFAULT_CORPUS_DESCRIPTOR
    template_files: dict[str, str] = field(default_factory=dict)
    provider: EmbeddingProviderSpec | None = None

    def validate(self) -> None:
        if not self.backends:
            raise ValidationError("config needs at least one backend")
        ids = [b.id for b in self.backends]
        if len(set(ids)) != len(ids):
            raise ValidationError(f"duplicate backend ids in config: {ids}")
        if not self.prompt_kinds:
            raise ValidationError("config needs at least one prompt kind")
        for k in self.prompt_kinds:
            if k not in PROMPT_KINDS:
                raise ValidationError(f"unknown prompt kind {k!r}")
        if len(set(self.prompt_kinds)) != len(self.prompt_kinds):
            raise ValidationError("duplicate prompt kinds")
        if self.iterations < 1:
            raise ValidationError("iterations must be >= 1")
        if self.max_parallel_backends < 1:
            raise ValidationError("max_parallel_backends must be >= 1")

    def templates(self) -> dict[str, PromptTemplate]:
        out = {}
        for kind in self.prompt_kinds:
            if kind in self.template_files:
                out[kind] = load_template(self.template_files[kind], kind)
            else:
                out[kind] = builtin_template(kind, self.corpus_descriptor)
        return out


def load_config(path: str | Path) -> ExperimentConfig:
    """Read a YAML (or JSON) experiment config. Relative paths resolve against its directory."""
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ValidationError(f"{path}: cannot parse config: {exc}") from None
    if not isinstance(raw, dict):
        raise ValidationError(f"{path}: config must be a mapping")
    base = path.parent

    def resolve(p: str) -> str:
        return str(p if Path(p).is_absolute() else (base / p))

    known = {"topics", "backends", "prompts", "iterations", "seed", "provider", "run_dir",
             "max_parallel_backends"}
    unknown = set(raw) - known
    if unknown:
        raise ValidationError(f"{path}: unknown config sections {sorted(unknown)}")
    for required in ("topics", "backends", "run_dir"):
        if required not in raw:
            raise ValidationError(f"{path}: missing required key {required!r}")
    prompts = raw.get("prompts") or {}
    backends = [BackendSpec.from_dict(b) for b in raw["backends"] or []]
    provider = raw.get("provider")
    if provider:
        provider = dict(provider)
        if provider.get("cache_path"):
            provider["cache_path"] = resolve(provider["cache_path"])
        provider = EmbeddingProviderSpec.from_dict(provider)
    cfg = ExperimentConfig(
        topics_path=resolve(raw["topics"]),
        backends=backends,
        run_dir=resolve(raw["run_dir"]),
        prompt_kinds=list(prompts.get("kinds", PROMPT_KINDS)),
        iterations=int(raw.get("iterations", 20)),
        global_seed=int(raw.get("seed", 0)),
        max_parallel_backends=int(raw.get("max_parallel_backends", 1)),
        corpus_descriptor=prompts.get("corpus_descriptor", DEFAULT_CORPUS_DESCRIPTOR),
        template_files={k: resolve(v) for k, v in (prompts.get("templates") or {}).items()},
        provider=provider,
    )
    cfg.validate()
    return cfg


def _sha256_file(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _snapshot(cfg: ExperimentConfig, topics_sha: str) -> dict:
    return {
        "version": SNAPSHOT_VERSION,
        "topics_sha256": topics_sha,
        "prompt_kinds": list(cfg.prompt_kinds),
        "templates": {k: t.body for k, t in cfg.templates().items()},
        "iterations": cfg.iterations,
        "global_seed": cfg.global_seed,
        "backends": [b.with_seed(cfg.global_seed).to_dict() for b in cfg.backends],
        "provider": cfg.provider.to_dict() if cfg.provider else None,
        "max_parallel_backends": cfg.max_parallel_backends,
    }


def _identity(snapshot: dict) -> dict:
    # concurrency does not change results
    return {k: v for k, v in snapshot.items() if k != "max_parallel_backends"}


def _dumps(obj) -> str:
    return json.dumps(obj, ensure_ascii=False, sort_keys=True)


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with tmp.open("w", encoding="utf-8") as fh:
        fh.write(text)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def _read_log(path: Path) -> list[dict]:
    """Read a JSON Lines log, truncating a torn final record left by a crash."""
    if not path.exists():
        return []
    data = path.read_bytes()
    records = []
    pos = 0
    while pos < len(data):
        nl = data.find(b"\n", pos)
        end = len(data) if nl == -1 else nl
        line = data[pos:end]
        try:
            if nl == -1:
                raise ValueError("unterminated")
            if line.strip():
                records.append(json.loads(line))
        except ValueError:
            if nl != -1 and nl + 1 < len(data):
                raise ValidationError(f"{path}: corrupt record at byte {pos}") from None
            logger.warning("%s: dropping torn final record", path)
            with path.open("r+b") as fh:
                fh.truncate(pos)
            break
        pos = end + 1
    return records


def cell_sort_key(key) -> tuple:
    return (key[0], key[1], key[2], key[3])


def _project(completions: Iterable[CompletionRecord]) -> tuple[list[LabelRecord], dict[CellKey, str]]:
    labels, bad = [], {}
    for c in completions:
        try:
            labels.append(label_record(c.backend_id, c.prompt_kind, c.iteration, c.topic_id,
                                       c.raw_response))
        except EmptyLabelError as exc:
            bad[c.key] = f"unparseable completion: {exc}"
    labels.sort(key=lambda r: cell_sort_key(r.key))
    return labels, bad


def project_labels(completions: Iterable[CompletionRecord]) -> list[LabelRecord]:
    """Parse and normalize every completion; unparseable ones are dropped (see RunStore.failures)."""
    return _project(completions)[0]


class RunStore:
    """In-memory view of a run directory."""

    def __init__(self, run_dir: Path, snapshot: dict, topics: TopicSet,
                 completions: dict[CellKey, CompletionRecord], failures: dict[CellKey, str]):
        self.run_dir = run_dir
        self.snapshot = snapshot
        self.topics = topics
        self.completions = completions
        labels, bad = _project(completions.values())
        self.labels: list[LabelRecord] = labels
        self.failures = {k: v for k, v in failures.items() if k not in completions}
        self.failures.update(bad)

    @property
    def backends(self) -> list[BackendSpec]:
        return [BackendSpec.from_dict(b) for b in self.snapshot["backends"]]

    @property
    def prompt_kinds(self) -> list[str]:
        return list(self.snapshot["prompt_kinds"])

    @property
    def iterations(self) -> int:
        return int(self.snapshot["iterations"])

    @property
    def provider(self) -> EmbeddingProviderSpec | None:
        p = self.snapshot.get("provider")
        return EmbeddingProviderSpec.from_dict(p) if p else None

    def grid(self) -> list[CellKey]:
        return [CellKey(b.id, k, i, t.id)
                for b in sorted(self.backends, key=lambda b: b.id)
                for k in sorted(self.prompt_kinds)
                for i in range(self.iterations)
                for t in self.topics]

    def status(self) -> dict[CellKey, str]:
        ok = {r.key for r in self.labels}
        return {k: "ok" if k in ok else ("failed" if k in self.failures else "missing")
                for k in self.grid()}

    def pending(self) -> list[CellKey]:
        return [k for k, s in self.status().items() if s != "ok"]

    def summary(self) -> list[dict]:
        """Per (backend, prompt) cell counts."""
        rows: dict[tuple[str, str], dict] = {}
        for key, state in self.status().items():
            row = rows.setdefault((key[0], key[1]), {"backend_id": key[0], "prompt_kind": key[1],
                                                       "expected": 0, "ok": 0, "failed": 0,
                                                       "missing": 0})
            row["expected"] += 1
            row[state] += 1
        return [rows[k] for k in sorted(rows)]

    def write_derived(self) -> None:
        _atomic_write(self.run_dir / LABELS,
                      "".join(_dumps(r.to_dict()) + "\n" for r in self.labels))
        index = {"|".join(map(str, k)): s for k, s in self.status().items()}
        _atomic_write(self.run_dir / STATUS, _dumps(index) + "\n")


def load_store(run_dir: str | Path) -> RunStore:
    run_dir = Path(run_dir)
    if not run_dir.is_dir():
        raise ValidationError(f"run dir not found: {run_dir}")
    snap_path = run_dir / SNAPSHOT
    if not snap_path.is_file():
        raise ValidationError(f"config snapshot missing in {run_dir}")
    snapshot = json.loads(snap_path.read_text(encoding="utf-8"))
    topics_path = run_dir / TOPICS
    if not topics_path.is_file() or _sha256_file(topics_path) != snapshot["topics_sha256"]:
        raise ConfigMismatch(f"config mismatch: topic file in {run_dir} differs from snapshot")
    topics = load_topics(topics_path)

    completions: dict[CellKey, CompletionRecord] = {}
    for d in _read_log(run_dir / COMPLETIONS):
        rec = CompletionRecord.from_dict(d)
        if rec.key in completions:
            logger.warning("duplicate successful record for %s ignored", tuple(rec.key))
            continue
        completions[rec.key] = rec
    failures: dict[CellKey, str] = {}
    for d in _read_log(run_dir / FAILURES):
        failures[CellKey(d["backend_id"], d["prompt_kind"], d["iteration"], d["topic_id"])] = d["reason"]

    store = RunStore(run_dir, snapshot, topics, completions, failures)
    grid = set(store.grid())
    stray = [k for k in list(completions) + list(failures) if k not in grid]
    if stray:
        raise ConfigMismatch(f"config mismatch: {len(stray)} on-disk records fall outside the "
                             f"snapshot grid, e.g. {tuple(stray[0])}")
    return store


def _prepare(cfg: ExperimentConfig) -> RunStore:
    cfg.validate()
    run_dir = Path(cfg.run_dir)
    topics = load_topics(cfg.topics_path)
    try:
        run_dir.mkdir(parents=True, exist_ok=True)
        probe = run_dir / ".write-probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise ValidationError(f"run dir not writable: {run_dir} ({exc})") from None

    topics_copy = run_dir / TOPICS
    snap_path = run_dir / SNAPSHOT
    if snap_path.exists():
        store = load_store(run_dir)
        normalized = TopicSet(topics.topics)
        if [t.to_dict() for t in normalized] != [t.to_dict() for t in store.topics]:
            raise ConfigMismatch("config mismatch: topics differ from the existing run")
        fresh = _snapshot(cfg, store.snapshot["topics_sha256"])
        if _identity(fresh) != _identity(store.snapshot):
            raise ConfigMismatch(f"config mismatch with existing run in {run_dir}")
        return store
    save_topics(topics, topics_copy)
    snapshot = _snapshot(cfg, _sha256_file(topics_copy))
    _atomic_write(snap_path, json.dumps(snapshot, indent=2, sort_keys=True) + "\n")
    return load_store(run_dir)


GatewayFactory = Callable[[BackendSpec], Gateway]


def _execute(store: RunStore, *, gateway_factory: GatewayFactory = Gateway,
             max_parallel_backends: int = 1,
             on_record: Callable[[CellKey], None] | None = None) -> RunStore:
    pending = store.pending()
    if not pending:
        store.write_derived()
        return store
    templates = {k: PromptTemplate(k, body, corpus_descriptor="")
                 for k, body in store.snapshot["templates"].items()}
    backends = {b.id: b for b in store.backends}
    by_backend: dict[str, list[CellKey]] = {}
    for key in pending:
        by_backend.setdefault(key.backend_id, []).append(key)

    results: queue.Queue = queue.Queue()
    stop = threading.Event()
    _DONE = object()

    def work(backend_id: str, keys: list[CellKey]) -> None:
        spec = backends[backend_id]
        gw = gateway_factory(spec)
        auth_failure: str | None = None
        try:
            for key in keys:
                if stop.is_set():
                    break
                if auth_failure:
                    results.put(("fail", key, auth_failure, None))
                    continue
                topic = store.topics[key.topic_id]
                prompt = render_prompt(templates[key.prompt_kind], topic)
                item = _run_cell(gw, spec, key, topic, prompt)
                if item[0] == "fail" and item[2].startswith("auth-failure"):
                    auth_failure = item[2]
                results.put(item)
        except Exception as exc:  # surface worker crashes in the writer thread
            results.put(("crash", None, exc, None))
        finally:
            gw.close()
            results.put(_DONE)

    comp_fh = (store.run_dir / COMPLETIONS).open("a", encoding="utf-8")
    fail_fh = (store.run_dir / FAILURES).open("a", encoding="utf-8")
    pool = ThreadPoolExecutor(max_workers=max_parallel_backends)
    try:
        for bid in sorted(by_backend):
            pool.submit(work, bid, by_backend[bid])
        remaining = len(by_backend)
        while remaining:
            item = results.get()
            if item is _DONE:
                remaining -= 1
                continue
            outcome, key, payload, raw = item
            if outcome == "crash":
                raise payload
            if outcome == "ok":
                comp_fh.write(_dumps(payload.to_dict()) + "\n")
                comp_fh.flush()
                store.completions[key] = payload
                store.failures.pop(key, None)
            else:
                fail_fh.write(_dumps({
                    "backend_id": key.backend_id, "prompt_kind": key.prompt_kind,
                    "iteration": key.iteration, "topic_id": key.topic_id, "reason": payload,
                    "raw_response": raw, "timestamp": datetime.now(timezone.utc).isoformat(),
                }) + "\n")
                fail_fh.flush()
                store.failures[key] = payload
                logger.warning("cell %s failed: %s", tuple(key), payload)
            if on_record is not None:
                on_record(key)
    finally:
        stop.set()
        pool.shutdown(wait=True)
        comp_fh.close()
        fail_fh.close()

    store = RunStore(store.run_dir, store.snapshot, store.topics, store.completions, store.failures)
    store.write_derived()
    return store


def _run_cell(gw: Gateway, spec: BackendSpec, key: CellKey, topic, prompt: str):
    raw = None
    # a completion that parses to nothing is re-requested like a transient failure
    for _ in range(spec.max_retries + 1):
        try:
            rec = gw.complete(prompt, key, topic)
        except AuthError as exc:
            return ("fail", key, f"auth-failure: {exc}", None)
        except GatewayError as exc:
            return ("fail", key, f"{type(exc).__name__}: {exc}", None)
        raw = rec.raw_response
        try:
            label_record(key.backend_id, key.prompt_kind, key.iteration, key.topic_id, raw)
        except EmptyLabelError:
            continue
        return ("ok", key, rec, None)
    return ("fail", key, "empty label after parsing", raw)


def run_experiment(cfg: ExperimentConfig, **kwargs) -> RunStore:
    """Execute every cell of the grid not yet successful in ``cfg.run_dir``."""
    store = _prepare(cfg)
    kwargs.setdefault("max_parallel_backends", cfg.max_parallel_backends)
    return _execute(store, **kwargs)


def resume_run(run_dir: str | Path, cfg: ExperimentConfig | None = None, **kwargs) -> RunStore:
    """Continue a run from its snapshot; optionally check it still matches ``cfg``."""
    store = load_store(run_dir)
    if cfg is not None:
        cfg.validate()
        if _identity(_snapshot(cfg, store.snapshot["topics_sha256"])) != _identity(store.snapshot):
            raise ConfigMismatch("config mismatch")
        if _sha256_file(Path(cfg.topics_path)) != store.snapshot["topics_sha256"]:
            topics = load_topics(cfg.topics_path)
            if [t.to_dict() for t in topics] != [t.to_dict() for t in store.topics]:
                raise ConfigMismatch("config mismatch: topics differ")
    kwargs.setdefault("max_parallel_backends", int(store.snapshot.get("max_parallel_backends", 1)))
    return _execute(store, **kwargs)
