"""Loading and validating topic-model keyword exports.

Topic files are UTF-8 JSON Lines, one record per topic::

    {"id": 32, "keywords": ["carbon", "forests", "co2", ...]}

Blank lines are ignored. Keywords are kept verbatim (no case folding); label
normalization happens later, where distinctness is computed.

A BERTopic ``get_topic_info()`` frame converts with one line::

    df[df.Topic >= 0].apply(lambda r: print(json.dumps(
        {"id": int(r.Topic), "keywords": list(r.Representation)})), axis=1)
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

from topiclabel.errors import ValidationError

EXPECTED_KEYWORD_COUNT = 10


@dataclass(frozen=True)
class Topic:
    id: int
    keywords: tuple[str, ...]

    def __post_init__(self) -> None:
        if isinstance(self.id, bool) or not isinstance(self.id, int) or self.id < 0:
            raise ValidationError(f"topic id must be a non-negative integer, got {self.id!r}")
        kws = tuple(self.keywords)
        object.__setattr__(self, "keywords", kws)
        if not kws:
            raise ValidationError(f"topic {self.id}: empty keyword list")
        for kw in kws:
            if not isinstance(kw, str) or not kw.strip():
                raise ValidationError(f"topic {self.id}: empty or non-string keyword {kw!r}")
        if len(set(kws)) != len(kws):
            raise ValidationError(f"topic {self.id}: duplicate keywords")

    def to_dict(self) -> dict:
        return {"id": self.id, "keywords": list(self.keywords)}


@dataclass(frozen=True)
class TopicSet:
    topics: tuple[Topic, ...]
    source_path: str = ""
    corpus_note: str | None = None
    _by_id: dict = field(default=None, repr=False, compare=False)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        ordered = tuple(sorted(self.topics, key=lambda t: t.id))
        seen: set[int] = set()
        for t in ordered:
            if t.id in seen:
                raise ValidationError(f"duplicate topic id {t.id}")
            seen.add(t.id)
        object.__setattr__(self, "topics", ordered)
        object.__setattr__(self, "_by_id", {t.id: t for t in ordered})

    def __len__(self) -> int:
        return len(self.topics)

    def __iter__(self):
        return iter(self.topics)

    def __getitem__(self, topic_id: int) -> Topic:
        return self._by_id[topic_id]

    @property
    def ids(self) -> list[int]:
        return [t.id for t in self.topics]


def parse_topic_lines(lines: Iterable[str], source: str = "<memory>") -> TopicSet:
    topics = []
    for lineno, line in enumerate(lines, 1):
        line = line.strip()
        if not line:
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{source}:{lineno}: malformed record ({exc.msg})") from None
        if not isinstance(rec, dict) or "id" not in rec or "keywords" not in rec:
            raise ValidationError(f"{source}:{lineno}: malformed record, need 'id' and 'keywords'")
        if not isinstance(rec["keywords"], list):
            raise ValidationError(f"{source}:{lineno}: malformed record, 'keywords' must be a list")
        try:
            topics.append(Topic(rec["id"], tuple(rec["keywords"])))
        except ValidationError as exc:
            raise ValidationError(f"{source}:{lineno}: {exc}") from None
    if not topics:
        raise ValidationError("empty topic set")
    return TopicSet(tuple(topics), source_path=source)


def load_topics(path: str | Path) -> TopicSet:
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"topic file not found: {path}")
    with path.open(encoding="utf-8") as fh:
        return parse_topic_lines(fh, source=str(path))


def save_topics(ts: TopicSet, path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for t in ts:
            fh.write(json.dumps(t.to_dict(), ensure_ascii=False) + "\n")


def validate_topic_set(ts: TopicSet, expected: int = EXPECTED_KEYWORD_COUNT) -> list[str]:
    """Soft checks. Returns human-readable warnings; never raises, never mutates."""
    return [
        f"topic {t.id}: keyword count {len(t.keywords)} ≠ {expected}"
        for t in ts
        if len(t.keywords) != expected
    ]


def bundled_path(name: str) -> Path:
    """Path of a data file shipped inside the package (fixtures, examples)."""
    return Path(__file__).parent / "data" / name
