"""Exact computations on small instances.

Two independent dynamic programs cross-check the learned sampler: a
forward sweep over the enumerated state space gives the terminal
distribution, and a lattice over the positions of one string gives its
marginal likelihood summed over every segmentation path. Also: path
counting, total-variation distance, the n-gram diversity score, and
likelihood-ranked option picking.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from .dynvocab import DynamicVocabulary, TERMINAL_CONTENT
from .policy import ActionScorer, PolicyParams, State

DEFAULT_STATE_BOUND = 10**6


def _alphabet(vocab: DynamicVocabulary) -> list[int]:
    return sorted(vocab.fixed_token_ids)


def _state_count(n_tokens: int, max_len: int) -> int:
    total, width = 0, 1
    for _ in range(max_len + 1):
        total += width
        width *= n_tokens
    return total


def enumerate_terminal_states(
    vocab: DynamicVocabulary,
    prefix: Sequence[int],
    max_len: int,
    bound: int = DEFAULT_STATE_BOUND,
) -> list[tuple[int, ...]]:
    """All generated sequences of length 0..max_len over the fixed tokens.

    Spans add paths, not states, so this is the full terminal support.
    """
    alphabet = _alphabet(vocab)
    if _state_count(len(alphabet), max_len) > bound:
        raise ValueError("state space exceeds the enumeration bound")
    out: list[tuple[int, ...]] = []
    for length in range(max_len + 1):
        out.extend(itertools.product(alphabet, repeat=length))
    return out


@dataclass
class EnumeratedSpace:
    """Explicit DAG: states keyed by generated suffix, edges by content."""

    prefix: tuple[int, ...]
    max_len: int
    states: list[tuple[int, ...]]
    edges: list[tuple[tuple[int, ...], tuple[int, ...], tuple[int, ...]]] = field(
        repr=False, default_factory=list
    )

    @classmethod
    def build(
        cls,
        vocab: DynamicVocabulary,
        prefix: Sequence[int],
        max_len: int,
        bound: int = DEFAULT_STATE_BOUND,
    ) -> "EnumeratedSpace":
        states = enumerate_terminal_states(vocab, prefix, max_len, bound)
        known = set(states)
        space = cls(tuple(prefix), max_len, list(states))
        for s in states:
            room = max_len - len(s)
            for content in vocab.contents():
                if 0 < len(content) <= room:
                    nxt = s + content
                    if nxt in known:
                        space.edges.append((s, content, nxt))
        return space

    def in_path_counts(self) -> dict[tuple[int, ...], int]:
        """Number of distinct action paths from the initial state to each state."""
        incoming: dict[tuple[int, ...], list[tuple[int, ...]]] = {}
        for src, _, dst in self.edges:
            incoming.setdefault(dst, []).append(src)
        counts: dict[tuple[int, ...], int] = {(): 1}
        for s in sorted(self.states, key=lambda x: (len(x), x)):
            if s == ():
                continue
            counts[s] = sum(counts[p] for p in incoming.get(s, []))
        return counts


def exact_terminal_distribution(
    vocab: DynamicVocabulary,
    params: PolicyParams,
    prefix: Sequence[int],
    max_len: int,
    bound: int = DEFAULT_STATE_BOUND,
    scorer: Optional[ActionScorer] = None,
) -> dict[tuple[int, ...], float]:
    """Forward DP in topological order: reach mass times termination mass."""
    states = enumerate_terminal_states(vocab, prefix, max_len, bound)
    if scorer is None:
        scorer = ActionScorer(vocab, params, max_len)
    prefix = tuple(prefix)
    reach: dict[tuple[int, ...], float] = {s: 0.0 for s in states}
    reach[()] = 1.0
    terminal: dict[tuple[int, ...], float] = {}
    term_idx = scorer.terminal_index
    for s in states:  # already ordered by generated length
        rho = reach[s]
        if rho == 0.0:
            terminal[s] = 0.0
            continue
        probs = scorer.distribution(State(prefix, s))
        terminal[s] = rho * probs[term_idx]
        for idx, content in enumerate(scorer.contents):
            if content and probs[idx] > 0.0:
                reach[s + content] += rho * probs[idx]
    return terminal


def marginal_likelihood(
    text: Sequence[int],
    vocab: DynamicVocabulary,
    params: PolicyParams,
    prefix: Sequence[int],
    max_len: int,
    scorer: Optional[ActionScorer] = None,
) -> float:
    """Probability of ``text`` summed over all segmentation paths (DP lattice)."""
    text = tuple(text)
    if len(text) > max_len:
        return 0.0
    if scorer is None:
        scorer = ActionScorer(vocab, params, max_len)
    prefix = tuple(prefix)
    lengths = sorted({len(c) for c in vocab.contents() if c})
    mass = np.zeros(len(text) + 1)
    mass[0] = 1.0
    for i in range(len(text)):
        if mass[i] == 0.0:
            continue
        probs = None
        for ln in lengths:
            if i + ln > len(text):
                break
            content = text[i : i + ln]
            if content not in vocab:
                continue
            if probs is None:
                probs = scorer.distribution(State(prefix, text[:i]))
            mass[i + ln] += mass[i] * probs[scorer.content_pos[content]]
    final = scorer.distribution(State(prefix, text))
    return float(mass[len(text)] * final[scorer.terminal_index])


def count_segmentations(
    text: Sequence[int], vocab: DynamicVocabulary | Sequence[tuple[int, ...]]
) -> int:
    """Distinct action sequences that compose ``text`` from vocabulary contents."""
    contents = vocab.contents() if isinstance(vocab, DynamicVocabulary) else list(vocab)
    by_len: dict[int, set[tuple[int, ...]]] = {}
    for c in contents:
        if c:
            by_len.setdefault(len(c), set()).add(tuple(c))
    text = tuple(text)
    ways = [0] * (len(text) + 1)
    ways[0] = 1
    for i in range(len(text)):
        if ways[i] == 0:
            continue
        for ln, pool in by_len.items():
            if i + ln <= len(text) and text[i : i + ln] in pool:
                ways[i + ln] += ways[i]
    return ways[len(text)]


def tv_distance(p: Mapping, q: Mapping) -> float:
    """Half the L1 distance; missing keys count as zero mass."""
    keys = set(p) | set(q)
    return 0.5 * sum(abs(p.get(k, 0.0) - q.get(k, 0.0)) for k in keys)


def diversity(tokens: Sequence[int]) -> float:
    """100 * product over n=2..4 of (unique n-grams / total n-grams)."""
    tokens = tuple(tokens)
    score = 1.0
    for n in range(2, 5):
        total = len(tokens) - n + 1
        if total <= 0:
            continue
        grams = {tokens[i : i + n] for i in range(total)}
        score *= len(grams) / total
    return 100.0 * score


def reward_target_distribution(
    rewards: Mapping[tuple[int, ...], float]
) -> dict[tuple[int, ...], float]:
    """Normalize a reward table into the target distribution R / Z."""
    z = sum(rewards.values())
    if z <= 0:
        raise ValueError("rewards must have positive total mass")
    return {k: v / z for k, v in rewards.items()}


def choose_option(
    prompt: Sequence[int],
    options: Sequence[Sequence[int]],
    vocab: DynamicVocabulary,
    params: PolicyParams,
    max_len: int,
) -> int:
    """Index of the option with the highest marginal likelihood (ties: lowest)."""
    if not options:
        raise ValueError("no options given")
    scorer = ActionScorer(vocab, params, max_len)
    best_idx, best = 0, -1.0
    for i, option in enumerate(options):
        score = marginal_likelihood(option, vocab, params, prompt, max_len, scorer=scorer)
        if score > best:
            best_idx, best = i, score
    return best_idx
