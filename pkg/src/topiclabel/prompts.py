"""Prompt rendering and response parsing.

The two built-in templates reproduce the short-name and long-name prompts word
for word. Keywords are spliced in as ``kw1, kw2, ...`` (comma + space, no
brackets or quotes).
"""

from __future__ import annotations

import re
from dataclasses import asdict, dataclass
from pathlib import Path

from topiclabel.corpus import Topic
from topiclabel.errors import EmptyLabelError, ValidationError

PLACEHOLDER = "[KEYWORDS]"
DEFAULT_CORPUS_DESCRIPTOR = "Biology with 100 topics"
PROMPT_KINDS = ("short", "long")

_DEMANDS = {"short": "a single word", "long": "between one and three words"}
_DEMAND_TEXT = {"short": "of a single word", "long": "between one and three words"}

_TEMPLATE = (
    "I have a corpus of {corpus}. I have a topic that is described by the following "
    "keywords: [KEYWORDS]\n"
    "\n"
    "Based on the information above, extract a short topic label {demand} that can "
    "accurately represent the topic, in the following format:\n"
    "\n"
    "topic: <topic label>"
)

_MARKER = re.compile(r"topic:", re.IGNORECASE)
_QUOTE_PAIRS = {'"': '"', "'": "'", "<": ">", "`": "`", "“": "”", "‘": "’"}
_TERMINAL_PUNCT = ".,;:!?"
# not counted toward a label's length: "Carbon Cycle in Forests" is a three-word label
FUNCTION_WORDS = frozenset({
    "a", "an", "the", "of", "in", "on", "at", "to", "for", "from", "by", "with", "and", "or",
    "&", "-", "/", "vs", "vs.", "de", "des", "du", "la", "le", "les",
})


@dataclass(frozen=True)
class PromptTemplate:
    kind: str
    body: str
    corpus_descriptor: str = DEFAULT_CORPUS_DESCRIPTOR

    def __post_init__(self) -> None:
        if self.kind not in PROMPT_KINDS:
            raise ValidationError(f"unknown prompt kind {self.kind!r}")
        if self.body.count(PLACEHOLDER) != 1:
            raise ValidationError(f"template must contain {PLACEHOLDER} exactly once")
        if _DEMANDS[self.kind] not in self.body:
            raise ValidationError(f"{self.kind} template must ask for {_DEMANDS[self.kind]!r}")


def builtin_template(kind: str, corpus_descriptor: str = DEFAULT_CORPUS_DESCRIPTOR) -> PromptTemplate:
    if kind not in PROMPT_KINDS:
        raise ValidationError(f"unknown prompt kind {kind!r}")
    body = _TEMPLATE.format(corpus=corpus_descriptor, demand=_DEMAND_TEXT[kind])
    return PromptTemplate(kind, body, corpus_descriptor)


def load_template(path: str | Path, kind: str) -> PromptTemplate:
    return PromptTemplate(kind, Path(path).read_text(encoding="utf-8"), corpus_descriptor="")


SHORT_TEMPLATE = builtin_template("short")
LONG_TEMPLATE = builtin_template("long")


def render_prompt(template: PromptTemplate, topic: Topic) -> str:
    return template.body.replace(PLACEHOLDER, ", ".join(topic.keywords))


def is_conformant(kind: str, word_count: int) -> bool:
    if kind == "short":
        return word_count == 1
    return 1 <= word_count <= 3


def count_words(label: str) -> int:
    """Whitespace tokens minus function words (all tokens if only function words remain)."""
    tokens = label.split()
    content = [t for t in tokens if t.lower() not in FUNCTION_WORDS]
    return len(content) if content else len(tokens)


@dataclass(frozen=True)
class ParsedLabel:
    raw_label: str
    word_count: int
    conformant: bool
    parse_fallback: bool
    token_count: int = 0


def _strip_one_layer(text: str) -> str:
    if len(text) >= 2 and _QUOTE_PAIRS.get(text[0]) == text[-1]:
        return text[1:-1].strip()
    return text


def parse_label(raw_response: str, kind: str) -> ParsedLabel:
    """Pull the label out of a ``topic: <label>`` style completion.

    The first line carrying a case-insensitive ``topic:`` marker wins; the text
    after the marker (the last one, if the model repeated it) is the label.
    Without any marker the first non-empty line is used and ``parse_fallback``
    is set.
    """
    label = None
    fallback = False
    for line in raw_response.splitlines():
        matches = list(_MARKER.finditer(line))
        if matches:
            label = line[matches[-1].end():]
            break
    if label is None:
        fallback = True
        label = next((ln for ln in raw_response.splitlines() if ln.strip()), "")
    label = _strip_one_layer(label.strip())
    if not label:
        raise EmptyLabelError("empty label after parsing")
    n = count_words(label)
    return ParsedLabel(label, n, is_conformant(kind, n), fallback, len(label.split()))


def normalize_label(raw_label: str) -> str:
    """Lowercase, collapse whitespace, drop trailing ``.,;:!?``."""
    text = " ".join(raw_label.lower().split())
    text = text.rstrip(_TERMINAL_PUNCT + " ")
    if not text:
        raise EmptyLabelError(f"label {raw_label!r} is empty after normalization")
    return text


@dataclass(frozen=True)
class LabelRecord:
    backend_id: str
    prompt_kind: str
    iteration: int
    topic_id: int
    raw_label: str
    normalized_label: str
    word_count: int
    conformant: bool
    parse_fallback: bool
    token_count: int = 0

    @property
    def key(self) -> tuple[str, str, int, int]:
        return (self.backend_id, self.prompt_kind, self.iteration, self.topic_id)

    @property
    def group(self) -> tuple[str, str]:
        return (self.backend_id, self.prompt_kind)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "LabelRecord":
        return cls(**d)


def label_record(backend_id: str, prompt_kind: str, iteration: int, topic_id: int,
                 raw_response: str) -> LabelRecord:
    parsed = parse_label(raw_response, prompt_kind)
    return LabelRecord(
        backend_id=backend_id,
        prompt_kind=prompt_kind,
        iteration=iteration,
        topic_id=topic_id,
        raw_label=parsed.raw_label,
        normalized_label=normalize_label(parsed.raw_label),
        word_count=parsed.word_count,
        conformant=parsed.conformant,
        parse_fallback=parsed.parse_fallback,
        token_count=parsed.token_count,
    )
