"""LLM-assisted topic labelling harness: generate labels for topic-model keyword
sets and evaluate them (distinctness, stability, embedding similarity, human
accuracy scores, API cost)."""

from topiclabel.corpus import Topic, TopicSet, load_topics, save_topics, validate_topic_set
from topiclabel.prompts import (
    LONG_TEMPLATE,
    SHORT_TEMPLATE,
    LabelRecord,
    PromptTemplate,
    normalize_label,
    parse_label,
    render_prompt,
)

__version__ = "0.1.0"

__all__ = [
    "Topic",
    "TopicSet",
    "load_topics",
    "save_topics",
    "validate_topic_set",
    "PromptTemplate",
    "SHORT_TEMPLATE",
    "LONG_TEMPLATE",
    "LabelRecord",
    "render_prompt",
    "parse_label",
    "normalize_label",
]
