"""Per-episode dynamic vocabulary: fixed tokens, retrieved spans, terminal symbol."""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Optional, Sequence

from .corpus import CorpusIndex, Document, TERMINAL_ID
from .segmentation import Provenance, SegmentationConfig


class ActionKind(enum.Enum):
    FIXED_TOKEN = "fixed_token"
    RETRIEVED_SPAN = "retrieved_span"
    TERMINAL = "terminal"


TERMINAL_CONTENT: tuple[int, ...] = ()


@dataclass
class SpanAction:
    kind: ActionKind
    content: tuple[int, ...]
    occurrences: list[Provenance] = field(default_factory=list)

    def __post_init__(self):
        if self.kind is ActionKind.FIXED_TOKEN and len(self.content) != 1:
            raise ValueError("fixed-token action must hold one token")
        if self.kind is ActionKind.TERMINAL and self.content != ():
            raise ValueError("terminal action has empty content")
        if self.kind is ActionKind.RETRIEVED_SPAN and not self.occurrences:
            raise ValueError("retrieved span needs at least one occurrence")


def extract_spans(
    doc: Document, cfg: SegmentationConfig
) -> list[tuple[tuple[int, ...], Provenance]]:
    """All contiguous substrings of admissible length with their coordinates."""
    out = []
    n = len(doc.tokens)
    for start in range(n):
        top = min(cfg.l_max, n - start)
        for length in range(cfg.l_min, top + 1):
            out.append(
                (
                    doc.tokens[start : start + length],
                    (doc.doc_id, start, start + length - 1),
                )
            )
    return out


class DynamicVocabulary:
    """Content-keyed action set; one action per distinct token sequence."""

    def __init__(self, fixed_token_ids: Sequence[int], source_docs: Sequence[int] = ()):
        self.actions: dict[tuple[int, ...], SpanAction] = {}
        self.source_docs = list(source_docs)
        self.doc_tokens: dict[int, tuple[int, ...]] = {}
        for t in fixed_token_ids:
            if t == TERMINAL_ID:
                continue
            self.actions[(t,)] = SpanAction(ActionKind.FIXED_TOKEN, (t,))
        self._fixed_ids = [t for t in fixed_token_ids if t != TERMINAL_ID]

    def add_source_doc(self, doc_id: int, tokens: tuple[int, ...]) -> None:
        self.doc_tokens[doc_id] = tuple(tokens)

    def add_span(self, content: tuple[int, ...], occurrence: Provenance) -> None:
        action = self.actions.get(content)
        if action is None:
            self.actions[content] = SpanAction(
                ActionKind.RETRIEVED_SPAN, content, [occurrence]
            )
        elif action.kind is ActionKind.RETRIEVED_SPAN:
            action.occurrences.append(occurrence)
        else:
            raise ValueError("span content collides with a fixed token")

    def seal(self) -> "DynamicVocabulary":
        self.actions[TERMINAL_CONTENT] = SpanAction(ActionKind.TERMINAL, ())
        return self

    @property
    def fixed_token_ids(self) -> list[int]:
        return list(self._fixed_ids)

    def contents(self) -> list[tuple[int, ...]]:
        return list(self.actions.keys())

    def span_actions(self) -> list[SpanAction]:
        return [
            a for a in self.actions.values() if a.kind is ActionKind.RETRIEVED_SPAN
        ]

    def __contains__(self, content: tuple[int, ...]) -> bool:
        return content in self.actions

    def __len__(self) -> int:
        return len(self.actions)

    def to_json(self) -> dict:
        return {
            "source_docs": self.source_docs,
            "actions": [
                {
                    "kind": a.kind.value,
                    "content": list(a.content),
                    "occurrences": [list(o) for o in a.occurrences],
                }
                for a in self.actions.values()
            ],
        }


def build_vocabulary(
    prefix: Sequence[int],
    index: CorpusIndex,
    k: int,
    cfg: SegmentationConfig,
    extra_doc_ids: Sequence[int] = (),
    include_spans: bool = True,
) -> DynamicVocabulary:
    """Action set for one episode: fixed tokens, spans of the supporting docs, terminal.

    Supporting docs are ``extra_doc_ids`` (the episode's own document during
    training) followed by the top-k retrieval for the prefix.
    """
    source: list[int] = []
    for d in extra_doc_ids:
        if d not in source:
            source.append(d)
    if k > 0:
        for d in index.retrieve(prefix, k):
            if d not in source:
                source.append(d)
    vocab = DynamicVocabulary(index.vocab.token_ids(), source_docs=source)
    if include_spans:
        for doc_id in source:
            doc = index.documents[doc_id]
            vocab.add_source_doc(doc_id, doc.tokens)
            for content, occ in extract_spans(doc, cfg):
                vocab.add_span(content, occ)
    return vocab.seal()
