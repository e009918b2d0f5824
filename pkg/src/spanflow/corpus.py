"""Corpus ingestion: tokenization, fixed vocabulary, TF-IDF retrieval, prefix splits.

Word-level tokenizer: whitespace-delimited, with sentence punctuation
(. ! ?) split off as standalone tokens. The fixed vocabulary reserves id 0
for unknown words and id 1 for the termination symbol.
"""
from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

UNK_SURFACE = "<unk>"
TERMINAL_SURFACE = "<eos>"
UNK_ID = 0
TERMINAL_ID = 1
SENTENCE_END_SURFACES = (".", "!", "?")

_SPLIT_RE = re.compile(r"([.!?])")


def split_words(text: str) -> list[str]:
    """Whitespace split with . ! ? broken out as their own tokens."""
    words: list[str] = []
    for chunk in text.split():
        for part in _SPLIT_RE.split(chunk):
            if part:
                words.append(part)
    return words


class Vocabulary:
    """Fixed word-level vocabulary; ids are first-seen order after reserved slots."""

    def __init__(self, surfaces: Optional[Sequence[str]] = None):
        self.surfaces: list[str] = [UNK_SURFACE, TERMINAL_SURFACE]
        self.index: dict[str, int] = {UNK_SURFACE: UNK_ID, TERMINAL_SURFACE: TERMINAL_ID}
        if surfaces is not None:
            for s in surfaces:
                self.add(s)

    def __len__(self) -> int:
        return len(self.surfaces)

    def __contains__(self, surface: str) -> bool:
        return surface in self.index

    def add(self, surface: str) -> int:
        if not surface:
            raise ValueError("empty surface")
        got = self.index.get(surface)
        if got is None:
            got = len(self.surfaces)
            self.surfaces.append(surface)
            self.index[surface] = got
        return got

    def id_of(self, surface: str) -> int:
        return self.index.get(surface, UNK_ID)

    def surface_of(self, token_id: int) -> str:
        return self.surfaces[token_id]

    def decode(self, token_ids: Iterable[int]) -> str:
        return " ".join(self.surfaces[t] for t in token_ids)

    def token_ids(self) -> list[int]:
        """All ids usable as single-token generation actions (terminal excluded)."""
        return [i for i in range(len(self.surfaces)) if i != TERMINAL_ID]

    def sentence_end_ids(self) -> frozenset[int]:
        return frozenset(
            self.index[s] for s in SENTENCE_END_SURFACES if s in self.index
        )

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for s in self.surfaces:
                fh.write(s + "\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, encoding="utf-8") as fh:
            surfaces = [line.rstrip("\n") for line in fh]
        if surfaces[:2] != [UNK_SURFACE, TERMINAL_SURFACE]:
            raise ValueError("vocabulary file missing reserved entries")
        vocab = cls()
        for s in surfaces[2:]:
            vocab.add(s)
        return vocab


def tokenize(text: str, vocab: Vocabulary, grow: bool = False) -> list[int]:
    """Token ids for ``text``; unknown words map to UNK unless ``grow``."""
    words = split_words(text)
    if grow:
        return [vocab.add(w) for w in words]
    return [vocab.id_of(w) for w in words]


@dataclass(frozen=True)
class Document:
    doc_id: int
    tokens: tuple[int, ...]

    def __post_init__(self):
        if not self.tokens:
            raise ValueError("document has no tokens")


def build_fixed_vocab(token_docs: Sequence[Sequence[str]]) -> Vocabulary:
    """Vocabulary over every distinct surface, reserved entries first."""
    if not token_docs:
        raise ValueError("empty corpus")
    vocab = Vocabulary()
    for words in token_docs:
        for w in words:
            vocab.add(w)
    return vocab


def load_corpus_lines(path) -> list[str]:
    with open(path, encoding="utf-8") as fh:
        return [line.strip() for line in fh if line.strip()]


class CorpusIndex:
    """Immutable TF-IDF index over a document collection."""

    def __init__(
        self,
        vocab: Vocabulary,
        documents: Sequence[Document],
        k_train: int = 8,
        k_infer: int = 16,
    ):
        if k_train < 1 or k_infer < 1:
            raise ValueError("retrieval depths must be >= 1")
        self.vocab = vocab
        self.documents = list(documents)
        self.k_train = k_train
        self.k_infer = k_infer
        self._df: dict[int, int] = {}
        for doc in self.documents:
            for t in set(doc.tokens):
                self._df[t] = self._df.get(t, 0) + 1
        n = len(self.documents)
        self._idf = {
            t: math.log((1.0 + n) / (1.0 + df)) + 1.0 for t, df in self._df.items()
        }
        self._doc_vecs = [self._weigh(doc.tokens) for doc in self.documents]

    @classmethod
    def build(cls, lines: Sequence[str], k_train: int = 8, k_infer: int = 16) -> "CorpusIndex":
        word_docs = [split_words(line) for line in lines]
        word_docs = [w for w in word_docs if w]
        vocab = build_fixed_vocab(word_docs)
        docs = [
            Document(i, tuple(vocab.index[w] for w in words))
            for i, words in enumerate(word_docs)
        ]
        return cls(vocab, docs, k_train=k_train, k_infer=k_infer)

    def _idf_of(self, token: int) -> float:
        got = self._idf.get(token)
        if got is None:
            n = len(self.documents)
            got = math.log((1.0 + n) / 1.0) + 1.0
        return got

    def _weigh(self, tokens: Sequence[int]) -> dict[int, float]:
        tf: dict[int, int] = {}
        for t in tokens:
            tf[t] = tf.get(t, 0) + 1
        vec = {t: c * self._idf_of(t) for t, c in tf.items()}
        norm = math.sqrt(sum(w * w for w in vec.values()))
        if norm > 0:
            vec = {t: w / norm for t, w in vec.items()}
        return vec

    def retrieve(self, query: Sequence[int], k: int) -> list[int]:
        """Up to k doc_ids by descending cosine similarity, ties by ascending id."""
        if k < 1:
            raise ValueError("k must be >= 1")
        qvec = self._weigh(query)
        scored = []
        for doc, dvec in zip(self.documents, self._doc_vecs):
            small, big = (qvec, dvec) if len(qvec) < len(dvec) else (dvec, qvec)
            sim = sum(w * big.get(t, 0.0) for t, w in small.items())
            scored.append((-sim, doc.doc_id))
        scored.sort()
        return [doc_id for _, doc_id in scored[:k]]

    def similarity(self, query: Sequence[int], doc_id: int) -> float:
        qvec = self._weigh(query)
        dvec = self._doc_vecs[doc_id]
        return sum(w * dvec.get(t, 0.0) for t, w in qvec.items())

    def save(self, path) -> None:
        payload = {
            "vocab": self.vocab.surfaces,
            "documents": [list(d.tokens) for d in self.documents],
            "k_train": self.k_train,
            "k_infer": self.k_infer,
        }
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "CorpusIndex":
        with open(path, encoding="utf-8") as fh:
            payload = json.load(fh)
        vocab = Vocabulary()
        for s in payload["vocab"][2:]:
            vocab.add(s)
        docs = [Document(i, tuple(ts)) for i, ts in enumerate(payload["documents"])]
        return cls(vocab, docs, k_train=payload["k_train"], k_infer=payload["k_infer"])


def sentence_bounds(tokens: Sequence[int], end_ids: frozenset[int]) -> list[int]:
    """End positions (exclusive) of each sentence; the tail counts as one."""
    bounds = []
    for i, t in enumerate(tokens):
        if t in end_ids:
            bounds.append(i + 1)
    if not bounds or bounds[-1] != len(tokens):
        bounds.append(len(tokens))
    return bounds


def split_prefix(
    tokens: Sequence[int], target_len: int, end_ids: frozenset[int]
) -> tuple[tuple[int, ...], tuple[int, ...]]:
    """Greatest whole-sentence prefix not exceeding target_len (at least one sentence)."""
    tokens = tuple(tokens)
    if not tokens:
        raise ValueError("cannot split an empty document")
    bounds = sentence_bounds(tokens, end_ids)
    cut = bounds[0]
    for b in bounds[1:]:
        if b <= target_len:
            cut = b
        else:
            break
    return tokens[:cut], tokens[cut:]
