"""Probabilistic span segmentation that induces a DAG over a document.

Left-to-right scan per threshold p_r: whenever a longest reference match of
admissible length exists at the cursor, it is committed with probability
1 - p_r; otherwise the cursor token is emitted on its own and the search
continues one token later. p_r = 0 therefore reduces to forward maximum
matching, while larger thresholds shift the committed boundaries, so the
union of the per-threshold outputs yields states reachable along several
piece paths.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

from .corpus import Document
from .util import counter_uniform

Provenance = tuple[int, int, int]  # (doc_id, start, end) with end inclusive


@dataclass(frozen=True)
class SegmentationConfig:
    l_min: int = 2
    l_max: int = 8
    thresholds: tuple[float, ...] = (0.0, 0.3, 0.6)
    rng_seed: int = 0

    def __post_init__(self):
        if not (2 <= self.l_min <= self.l_max):
            raise ValueError("need 2 <= l_min <= l_max")
        if not self.thresholds or self.thresholds[0] != 0.0:
            raise ValueError("first threshold must be 0")
        if any(not (0.0 <= p < 1.0) for p in self.thresholds):
            raise ValueError("thresholds must lie in [0, 1)")


@dataclass(frozen=True)
class Piece:
    tokens: tuple[int, ...]
    provenance: Optional[Provenance] = None


@dataclass
class Segmentation:
    doc_id: int
    threshold_index: int
    threshold: float
    pieces: list[Piece] = field(default_factory=list)

    def token_ids(self) -> tuple[int, ...]:
        out: list[int] = []
        for p in self.pieces:
            out.extend(p.tokens)
        return tuple(out)

    def provenanced_count(self) -> int:
        return sum(1 for p in self.pieces if p.provenance is not None)


def build_span_table(
    references: Sequence[Document], cfg: SegmentationConfig
) -> dict[tuple[int, ...], Provenance]:
    """First (lowest doc_id, lowest start) occurrence of every admissible span."""
    table: dict[tuple[int, ...], Provenance] = {}
    for doc in sorted(references, key=lambda d: d.doc_id):
        n = len(doc.tokens)
        for start in range(n):
            top = min(cfg.l_max, n - start)
            for length in range(cfg.l_min, top + 1):
                key = doc.tokens[start : start + length]
                if key not in table:
                    table[key] = (doc.doc_id, start, start + length - 1)
    return table


def longest_match(
    tokens: Sequence[int],
    cursor: int,
    references: Sequence[Document],
    cfg: SegmentationConfig,
    table: Optional[dict[tuple[int, ...], Provenance]] = None,
) -> Optional[tuple[int, Provenance]]:
    """Longest admissible span at ``cursor`` found contiguously in a reference."""
    if not 0 <= cursor < len(tokens):
        raise ValueError("cursor out of range")
    if table is None:
        table = build_span_table(references, cfg)
    top = min(cfg.l_max, len(tokens) - cursor)
    for length in range(top, cfg.l_min - 1, -1):
        hit = table.get(tuple(tokens[cursor : cursor + length]))
        if hit is not None:
            return length, hit
    return None


def segment_document(
    doc: Document, references: Sequence[Document], cfg: SegmentationConfig
) -> list[Segmentation]:
    """One segmentation per threshold; seeded-deterministic and lossless."""
    table = build_span_table(references, cfg)
    out: list[Segmentation] = []
    for r, p_r in enumerate(cfg.thresholds):
        seg = Segmentation(doc.doc_id, r, p_r)
        cursor = 0
        while cursor < len(doc.tokens):
            match = longest_match(doc.tokens, cursor, references, cfg, table=table)
            if match is not None:
                length, prov = match
                draw = counter_uniform(cfg.rng_seed, doc.doc_id, r, cursor)
                if draw >= p_r:
                    seg.pieces.append(
                        Piece(tuple(doc.tokens[cursor : cursor + length]), prov)
                    )
                    cursor += length
                    continue
            seg.pieces.append(Piece((doc.tokens[cursor],), None))
            cursor += 1
        out.append(seg)
    return out


def prefix_state_in_edges(
    segmentations: Sequence[Segmentation],
) -> dict[int, set[tuple[int, tuple[int, ...]]]]:
    """In-edges of each cumulative-prefix state across segmentations.

    States of one document are identified by their boundary position; an
    edge is (predecessor position, piece tokens). A position with two or
    more edges is reachable along distinct piece paths.
    """
    edges: dict[int, set[tuple[int, tuple[int, ...]]]] = {}
    for seg in segmentations:
        pos = 0
        for piece in seg.pieces:
            nxt = pos + len(piece.tokens)
            edges.setdefault(nxt, set()).add((pos, piece.tokens))
            pos = nxt
    return edges


def segmentation_record(seg: Segmentation, surfaces: Sequence[str]) -> dict:
    """JSON-serializable dump record for one (document, threshold) pair."""
    return {
        "doc_id": seg.doc_id,
        "threshold_index": seg.threshold_index,
        "threshold": seg.threshold,
        "pieces": [
            {
                "tokens": list(p.tokens),
                "surface": " ".join(surfaces[t] for t in p.tokens),
                "provenance": list(p.provenance) if p.provenance else None,
            }
            for p in seg.pieces
        ],
    }
