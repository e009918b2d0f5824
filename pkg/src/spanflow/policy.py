"""Span language model: forward policy over a dynamic vocabulary.

Two hand-rolled transformer encoders share one weight family: a causal
prefix encoder whose last hidden state scores the current state, and a
bidirectional span encoder whose start/end MLP halves embed each retrieved
span occurrence. Logits are dot products h . v per occurrence, per fixed
token, and for the terminal symbol; the softmax runs over occurrences and
the probability of appending a content is the sum over its occurrences.

Gradients come from the tape in :mod:`spanflow.tape`, not a framework; the
contract is agreement with central finite differences.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from . import tape as T
from .dynvocab import DynamicVocabulary, TERMINAL_CONTENT
from .util import load_checkpoint, save_checkpoint

NEG_INF = -np.inf


@dataclass(frozen=True)
class EncoderConfig:
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    ff_mult: int = 4
    context_limit: int = 128

    def __post_init__(self):
        if self.d_model % 2 != 0:
            raise ValueError("d_model must be even")
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must divide evenly across heads")

    def to_json(self) -> dict:
        return {
            "d_model": self.d_model,
            "n_layers": self.n_layers,
            "n_heads": self.n_heads,
            "ff_mult": self.ff_mult,
            "context_limit": self.context_limit,
        }

    @classmethod
    def from_json(cls, payload: dict) -> "EncoderConfig":
        return cls(**payload)


@dataclass(frozen=True)
class State:
    """Identity is (prefix, generated, terminated); span paths converge here."""

    prefix: tuple[int, ...]
    generated: tuple[int, ...] = ()
    terminated: bool = False

    def tokens(self) -> tuple[int, ...]:
        return self.prefix + self.generated

    def extend(self, content: tuple[int, ...]) -> "State":
        if self.terminated:
            raise ValueError("terminated state accepts no actions")
        return State(self.prefix, self.generated + tuple(content), False)

    def terminate(self) -> "State":
        if self.terminated:
            raise ValueError("state already terminated")
        return replace(self, terminated=True)


@dataclass
class Trajectory:
    states: list[State]
    actions: list[tuple[int, ...]]
    step_logprobs: Optional[list[float]] = None
    terminated: bool = True

    def __post_init__(self):
        if self.terminated:
            if not self.states[-1].terminated or self.actions[-1] != TERMINAL_CONTENT:
                raise ValueError("terminated trajectory must end with the terminal action")
        if len(self.actions) != len(self.states) - 1:
            raise ValueError("need one action per transition")

    @property
    def inner_states(self) -> list[State]:
        """s_0 .. s_n (the non-terminated visits)."""
        return self.states[:-1] if self.terminated else self.states

    @property
    def final_state(self) -> State:
        return self.states[-1]

    def log_probability(self) -> float:
        if self.step_logprobs is None:
            raise ValueError("trajectory carries no step log-probabilities")
        return float(sum(self.step_logprobs))


def _init_encoder(name: str, vocab_size: int, cfg: EncoderConfig, rng, out: dict) -> None:
    d, ff = cfg.d_model, cfg.d_model * cfg.ff_mult
    std = 0.02
    out[f"{name}.embed"] = rng.normal(0.0, std, (vocab_size, d))
    out[f"{name}.pos"] = rng.normal(0.0, std, (cfg.context_limit, d))
    for i in range(cfg.n_layers):
        p = f"{name}.h{i}"
        out[f"{p}.ln1.g"] = np.ones(d)
        out[f"{p}.ln1.b"] = np.zeros(d)
        for w in ("wq", "wk", "wv", "wo"):
            out[f"{p}.attn.{w}"] = rng.normal(0.0, std, (d, d))
        for b in ("bq", "bk", "bv", "bo"):
            out[f"{p}.attn.{b}"] = np.zeros(d)
        out[f"{p}.ln2.g"] = np.ones(d)
        out[f"{p}.ln2.b"] = np.zeros(d)
        out[f"{p}.ff.w1"] = rng.normal(0.0, std, (d, ff))
        out[f"{p}.ff.b1"] = np.zeros(ff)
        out[f"{p}.ff.w2"] = rng.normal(0.0, std, (ff, d))
        out[f"{p}.ff.b2"] = np.zeros(d)
    out[f"{name}.lnf.g"] = np.ones(d)
    out[f"{name}.lnf.b"] = np.zeros(d)


def init_mlp(name: str, d_in: int, d_out: int, rng, out: dict) -> None:
    out[f"{name}.w1"] = rng.normal(0.0, 0.02, (d_in, d_in))
    out[f"{name}.b1"] = np.zeros(d_in)
    out[f"{name}.w2"] = rng.normal(0.0, 0.02, (d_in, d_out))
    out[f"{name}.b2"] = np.zeros(d_out)


def mlp_apply(x: T.Tensor, t: dict, name: str) -> T.Tensor:
    h = T.gelu(T.matmul(x, t[f"{name}.w1"]) + t[f"{name}.b1"])
    return T.matmul(h, t[f"{name}.w2"]) + t[f"{name}.b2"]


def encode_tokens(
    ids: Sequence[int], t: dict, name: str, cfg: EncoderConfig, causal: bool
) -> T.Tensor:
    """Contextual (T, d) representations from the named encoder."""
    n = len(ids)
    if n == 0:
        raise ValueError("cannot encode an empty sequence")
    if n > cfg.context_limit:
        raise ValueError(f"sequence length {n} exceeds context limit {cfg.context_limit}")
    idx = np.asarray(ids, dtype=np.int64)
    x = T.gather_rows(t[f"{name}.embed"], idx) + T.gather_rows(
        t[f"{name}.pos"], np.arange(n)
    )
    dh = cfg.d_model // cfg.n_heads
    scale = 1.0 / np.sqrt(dh)
    mask = np.tril(np.ones((n, n), dtype=bool)) if causal else None
    for i in range(cfg.n_layers):
        p = f"{name}.h{i}"
        a = T.layer_norm(x, t[f"{p}.ln1.g"], t[f"{p}.ln1.b"])
        q = T.matmul(a, t[f"{p}.attn.wq"]) + t[f"{p}.attn.bq"]
        k = T.matmul(a, t[f"{p}.attn.wk"]) + t[f"{p}.attn.bk"]
        v = T.matmul(a, t[f"{p}.attn.wv"]) + t[f"{p}.attn.bv"]
        heads = []
        for h in range(cfg.n_heads):
            lo, hi = h * dh, (h + 1) * dh
            qh = T.slice_cols(q, lo, hi)
            kh = T.slice_cols(k, lo, hi)
            vh = T.slice_cols(v, lo, hi)
            scores = T.matmul(qh, T.transpose(kh)) * scale
            if mask is not None:
                scores = T.where_mask(scores, mask, NEG_INF)
            heads.append(T.matmul(T.softmax(scores, axis=-1), vh))
        attn = T.matmul(T.concat(heads, axis=1), t[f"{p}.attn.wo"]) + t[f"{p}.attn.bo"]
        x = x + attn
        f = T.layer_norm(x, t[f"{p}.ln2.g"], t[f"{p}.ln2.b"])
        f = T.gelu(T.matmul(f, t[f"{p}.ff.w1"]) + t[f"{p}.ff.b1"])
        f = T.matmul(f, t[f"{p}.ff.w2"]) + t[f"{p}.ff.b2"]
        x = x + f
    return T.layer_norm(x, t[f"{name}.lnf.g"], t[f"{name}.lnf.b"])


class PolicyParams:
    """All learnable arrays of the span language model, keyed by name."""

    def __init__(self, vocab_size: int, cfg: EncoderConfig, arrays: dict[str, np.ndarray]):
        self.vocab_size = vocab_size
        self.cfg = cfg
        self.arrays = arrays

    @classmethod
    def init(cls, vocab_size: int, cfg: EncoderConfig, seed: int) -> "PolicyParams":
        rng = np.random.default_rng(seed)
        arrays: dict[str, np.ndarray] = {}
        arrays["token_embeddings"] = rng.normal(0.0, 0.02, (vocab_size, cfg.d_model))
        arrays["terminal_embedding"] = rng.normal(0.0, 0.02, (cfg.d_model,))
        _init_encoder("prefix", vocab_size, cfg, rng, arrays)
        _init_encoder("span", vocab_size, cfg, rng, arrays)
        init_mlp("start_mlp", cfg.d_model, cfg.d_model // 2, rng, arrays)
        init_mlp("end_mlp", cfg.d_model, cfg.d_model // 2, rng, arrays)
        return cls(vocab_size, cfg, arrays)

    def as_tensors(self, requires_grad: bool = False) -> dict[str, T.Tensor]:
        return {k: T.Tensor(v, requires_grad=requires_grad) for k, v in self.arrays.items()}

    def save(self, path, extra_meta: Optional[dict] = None) -> None:
        meta = {"kind": "policy", "vocab_size": self.vocab_size, "config": self.cfg.to_json()}
        if extra_meta:
            meta.update(extra_meta)
        save_checkpoint(path, self.arrays, meta)

    @classmethod
    def load(cls, path) -> "PolicyParams":
        arrays, meta = load_checkpoint(path)
        if meta.get("kind") != "policy":
            raise ValueError("not a policy checkpoint")
        return cls(meta["vocab_size"], EncoderConfig.from_json(meta["config"]), arrays)


def encode_prefix(state: State, params: PolicyParams) -> np.ndarray:
    """Final-layer representation at the last position of the tokenized state."""
    if state.terminated:
        raise ValueError("terminated state has no forward representation")
    t = params.as_tensors()
    reps = encode_tokens(state.tokens(), t, "prefix", params.cfg, causal=True)
    return reps.data[-1].copy()


def span_vectors(
    tokens: Sequence[int],
    occurrences: Sequence[tuple[int, int]],
    t: dict,
    cfg: EncoderConfig,
) -> T.Tensor:
    """(m, d) vectors for (start, end)-inclusive occurrences within one document."""
    reps = encode_tokens(tokens, t, "span", cfg, causal=False)
    starts = np.asarray([s for s, _ in occurrences], dtype=np.int64)
    ends = np.asarray([e for _, e in occurrences], dtype=np.int64)
    left = mlp_apply(T.gather_rows(reps, starts), t, "start_mlp")
    right = mlp_apply(T.gather_rows(reps, ends), t, "end_mlp")
    return T.concat([left, right], axis=1)


def encode_spans(
    tokens: Sequence[int],
    occurrences: Sequence[tuple[int, int]],
    params: PolicyParams,
) -> np.ndarray:
    return span_vectors(tokens, occurrences, params.as_tensors(), params.cfg).data.copy()


class ActionScorer:
    """Episode-level cache of action-unit embeddings for one dynamic vocabulary.

    Valid only while the underlying parameter arrays are unchanged; the
    trainer rebuilds one per step, evaluation code reuses one per sweep.
    """

    def __init__(
        self,
        vocab: DynamicVocabulary,
        params: PolicyParams,
        max_len: int,
        tensors: Optional[dict] = None,
        requires_grad: bool = False,
    ):
        self.vocab = vocab
        self.params = params
        self.cfg = params.cfg
        self.max_len = max_len
        t = tensors if tensors is not None else params.as_tensors(requires_grad)
        self.tensors = t
        self._grad_mode = any(v.requires_grad for v in t.values())

        fixed_ids = vocab.fixed_token_ids
        span_acts = vocab.span_actions()
        self.contents: list[tuple[int, ...]] = (
            [(i,) for i in fixed_ids] + [a.content for a in span_acts] + [TERMINAL_CONTENT]
        )
        self.content_pos = {c: i for i, c in enumerate(self.contents)}
        self.terminal_index = len(self.contents) - 1
        self.content_len = np.array([len(c) for c in self.contents], dtype=np.int64)

        blocks = [T.gather_rows(t["token_embeddings"], np.asarray(fixed_ids, dtype=np.int64))]
        unit_content: list[int] = list(range(len(fixed_ids)))
        # Occurrences are encoded per source document and then permuted back
        # into span-action order.
        per_doc: dict[int, list[tuple[int, int]]] = {}
        flat: list[tuple[int, int, int]] = []  # (doc_id, slot within doc, content idx)
        for ai, act in enumerate(span_acts):
            cidx = len(fixed_ids) + ai
            for doc_id, s, e in act.occurrences:
                slot = len(per_doc.setdefault(doc_id, []))
                per_doc[doc_id].append((s, e))
                flat.append((doc_id, slot, cidx))
        if flat:
            doc_order = sorted(per_doc)
            offsets = {}
            total = 0
            doc_blocks = []
            for doc_id in doc_order:
                offsets[doc_id] = total
                occs = per_doc[doc_id]
                total += len(occs)
                doc_blocks.append(
                    span_vectors(vocab.doc_tokens[doc_id], occs, t, self.cfg)
                )
            stacked = doc_blocks[0] if len(doc_blocks) == 1 else T.concat(doc_blocks, axis=0)
            perm = np.array([offsets[d] + slot for d, slot, _ in flat], dtype=np.int64)
            blocks.append(T.gather_rows(stacked, perm))
            unit_content.extend(c for _, _, c in flat)
        blocks.append(T.reshape(t["terminal_embedding"], (1, self.cfg.d_model)))
        unit_content.append(self.terminal_index)

        self.unit_vectors = T.concat(blocks, axis=0) if len(blocks) > 1 else blocks[0]
        self.unit_content = np.asarray(unit_content, dtype=np.int64)
        self.unit_len = self.content_len[self.unit_content]
        self._dist_cache: dict[tuple[int, ...], np.ndarray] = {}

    def state_hidden(self, state: State) -> T.Tensor:
        reps = encode_tokens(state.tokens(), self.tensors, "prefix", self.cfg, causal=True)
        n = reps.data.shape[0]
        return T.reshape(T.gather_rows(reps, np.asarray([n - 1])), (self.cfg.d_model,))

    def masked_unit_logits(self, state: State) -> T.Tensor:
        if state.terminated:
            raise ValueError("terminated state accepts no actions")
        remaining = self.max_len - len(state.generated)
        if remaining < 0:
            raise ValueError("state exceeds max_len")
        allowed = self.unit_len <= remaining
        allowed[self.unit_content == self.terminal_index] = True
        logits = T.matmul(self.unit_vectors, self.state_hidden(state))
        return T.where_mask(logits, allowed, NEG_INF)

    def distribution(self, state: State) -> np.ndarray:
        """Probabilities over self.contents; cached per generated suffix (no-grad)."""
        if not self._grad_mode:
            hit = self._dist_cache.get(state.generated)
            if hit is not None:
                return hit
        unit = self.masked_unit_logits(state).data
        m = np.max(unit)
        e = np.exp(unit - m)
        unit_p = e / e.sum()
        probs = np.zeros(len(self.contents))
        np.add.at(probs, self.unit_content, unit_p)
        if not self._grad_mode:
            self._dist_cache[state.generated] = probs
        return probs

    def logprob_tensors(
        self, state: State, wanted: Sequence[tuple[int, ...]]
    ) -> dict[tuple[int, ...], T.Tensor]:
        """Log-probabilities of the requested contents as tape scalars."""
        unit = self.masked_unit_logits(state)
        log_z = T.logsumexp(unit)
        out = {}
        for content in wanted:
            units = np.flatnonzero(self.unit_content == self.content_pos[content])
            out[content] = T.sub(T.logsumexp(T.gather_rows(unit, units)), log_z)
        return out


@dataclass
class ForwardDistribution:
    contents: list[tuple[int, ...]]
    probs: np.ndarray
    unit_logits: np.ndarray = field(repr=False, default=None)
    unit_content: np.ndarray = field(repr=False, default=None)

    def prob_of(self, content: tuple[int, ...]) -> float:
        return float(self.probs[self.contents.index(tuple(content))])


def forward_policy(
    state: State, vocab: DynamicVocabulary, params: PolicyParams, max_len: int
) -> ForwardDistribution:
    """Distribution over successor contents including the terminal symbol."""
    scorer = ActionScorer(vocab, params, max_len)
    probs = scorer.distribution(state)
    return ForwardDistribution(
        contents=list(scorer.contents),
        probs=probs,
        unit_logits=scorer.masked_unit_logits(state).data,
        unit_content=scorer.unit_content,
    )


def backward_suffixes(state: State, vocab: DynamicVocabulary) -> list[tuple[int, ...]]:
    """Vocabulary contents that are suffixes of the generated text."""
    gen = state.generated
    out = []
    for content in vocab.contents():
        n = len(content)
        if 0 < n <= len(gen) and gen[len(gen) - n :] == content:
            out.append(content)
    return out


def backward_policy(
    state: State, vocab: DynamicVocabulary
) -> list[tuple[State, float]]:
    """Uniform distribution over predecessors reached by removing a suffix content."""
    if state.terminated:
        raise ValueError("backward policy of a terminal state is the deterministic unterminate step")
    if not state.generated:
        raise ValueError("the initial state has no predecessor")
    suffixes = backward_suffixes(state, vocab)
    p = 1.0 / len(suffixes)
    return [
        (State(state.prefix, state.generated[: len(state.generated) - len(c)]), p)
        for c in suffixes
    ]


def sample_trajectory(
    prefix: Sequence[int],
    vocab: DynamicVocabulary,
    params: PolicyParams,
    max_len: int,
    seed: Optional[int] = None,
    greedy: bool = False,
    scorer: Optional[ActionScorer] = None,
    rng: Optional[np.random.Generator] = None,
) -> Trajectory:
    """Ancestral (or greedy) sampling from the forward policy until terminal."""
    if scorer is None:
        scorer = ActionScorer(vocab, params, max_len)
    if rng is None:
        rng = np.random.default_rng(seed)
    state = State(tuple(prefix))
    states = [state]
    actions: list[tuple[int, ...]] = []
    logprobs: list[float] = []
    while True:
        probs = scorer.distribution(state)
        if greedy:
            idx = int(np.argmax(probs))
        else:
            idx = int(rng.choice(len(probs), p=probs))
        content = scorer.contents[idx]
        actions.append(content)
        logprobs.append(float(np.log(probs[idx])))
        if content == TERMINAL_CONTENT:
            states.append(state.terminate())
            break
        state = state.extend(content)
        states.append(state)
    return Trajectory(states=states, actions=actions, step_logprobs=logprobs)
