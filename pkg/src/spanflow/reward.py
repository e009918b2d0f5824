"""Terminal reward: smoothed trigram fluency blended with a preference score.

R(s) = p_LM(generated | prefix)^alpha * p_PM(full text)^(1-alpha), i.e.
log-linear in the two components. The trigram model is add-delta smoothed
so every sequence keeps strictly positive mass; the preference model is a
causal encoder with a scalar head trained with a pairwise logistic loss
plus a score-centering penalty.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import tape as T
from .corpus import TERMINAL_ID
from .optim import Adam
from .policy import EncoderConfig, State, _init_encoder, encode_tokens
from .util import load_checkpoint, save_checkpoint

PAD = -1  # context filler before the sequence start; never an outcome


@dataclass(frozen=True)
class RewardConfig:
    alpha: float = 0.5

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie strictly inside (0, 1)")


class TrigramLM:
    """Add-delta smoothed conditional p(w | w-2 w-1) over the fixed vocabulary.

    Contexts at the sequence start are PAD-filled. The context table is the
    marginal of the trigram table, so every conditional sums to one over the
    vocabulary (terminal-as-EOS included).
    """

    def __init__(self, delta: float, vocab_size: int):
        if delta <= 0:
            raise ValueError("delta must be positive")
        self.delta = delta
        self.vocab_size = vocab_size
        self.counts: dict[int, dict[tuple[int, ...], int]] = {1: {}, 2: {}, 3: {}}

    @classmethod
    def fit(cls, docs: Sequence[Sequence[int]], delta: float, vocab_size: int) -> "TrigramLM":
        if not docs:
            raise ValueError("empty corpus")
        lm = cls(delta, vocab_size)
        c1, c2, c3 = lm.counts[1], lm.counts[2], lm.counts[3]
        for tokens in docs:
            padded = (PAD, PAD) + tuple(tokens)
            for i in range(2, len(padded)):
                u, v, w = padded[i - 2], padded[i - 1], padded[i]
                c3[(u, v, w)] = c3.get((u, v, w), 0) + 1
                c2[(u, v)] = c2.get((u, v), 0) + 1
                c1[(w,)] = c1.get((w,), 0) + 1
        return lm

    def cond_logprob(self, w: int, u: int, v: int) -> float:
        num = self.counts[3].get((u, v, w), 0) + self.delta
        den = self.counts[2].get((u, v), 0) + self.delta * self.vocab_size
        return math.log(num) - math.log(den)

    def sequence_logprob(self, tokens: Sequence[int], prefix_len: int) -> float:
        """log p of positions prefix_len+1..N plus the end-of-sequence factor."""
        tokens = tuple(tokens)
        if prefix_len > len(tokens):
            raise ValueError("prefix length exceeds sequence length")
        padded = (PAD, PAD) + tokens
        total = 0.0
        for i in range(prefix_len, len(tokens)):
            total += self.cond_logprob(tokens[i], padded[i], padded[i + 1])
        total += self.cond_logprob(TERMINAL_ID, padded[len(tokens)], padded[len(tokens) + 1])
        return total

    def save(self, path) -> None:
        payload = {
            "delta": self.delta,
            "vocab_size": self.vocab_size,
            "counts": {
                str(n): [[list(k), c] for k, c in sorted(table.items())]
                for n, table in self.counts.items()
            },
        }
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "TrigramLM":
        with open(path, encoding="utf-8") as fh:
            payload = json.load(fh)
        lm = cls(payload["delta"], payload["vocab_size"])
        for n, entries in payload["counts"].items():
            lm.counts[int(n)] = {tuple(k): c for k, c in entries}
        return lm


def fit_trigram_lm(docs: Sequence[Sequence[int]], delta: float, vocab_size: int) -> TrigramLM:
    return TrigramLM.fit(docs, delta, vocab_size)


def lm_logprob(tokens: Sequence[int], prefix_len: int, lm: TrigramLM) -> float:
    return lm.sequence_logprob(tokens, prefix_len)


class PreferenceModel:
    """Causal encoder with a scalar head scoring a full token sequence."""

    def __init__(
        self,
        vocab_size: int,
        cfg: EncoderConfig,
        arrays: dict[str, np.ndarray],
        margin: float = 0.0,
        centering: float = 0.01,
    ):
        if margin < 0 or centering < 0:
            raise ValueError("margin and centering weight must be non-negative")
        self.vocab_size = vocab_size
        self.cfg = cfg
        self.arrays = arrays
        self.margin = margin
        self.centering = centering

    @classmethod
    def init(
        cls,
        vocab_size: int,
        cfg: EncoderConfig,
        seed: int,
        margin: float = 0.0,
        centering: float = 0.01,
    ) -> "PreferenceModel":
        rng = np.random.default_rng(seed)
        arrays: dict[str, np.ndarray] = {}
        _init_encoder("pm", vocab_size, cfg, rng, arrays)
        arrays["head.w"] = rng.normal(0.0, 0.02, (cfg.d_model,))
        arrays["head.b"] = np.zeros(())
        return cls(vocab_size, cfg, arrays, margin=margin, centering=centering)

    def as_tensors(self, requires_grad: bool = False) -> dict[str, T.Tensor]:
        return {k: T.Tensor(v, requires_grad=requires_grad) for k, v in self.arrays.items()}

    def score_tensor(self, tokens: Sequence[int], t: dict) -> T.Tensor:
        reps = encode_tokens(tokens, t, "pm", self.cfg, causal=True)
        n = reps.data.shape[0]
        last = T.reshape(T.gather_rows(reps, np.asarray([n - 1])), (self.cfg.d_model,))
        return T.matmul(last, t["head.w"]) + t["head.b"]

    def score(self, tokens: Sequence[int]) -> float:
        return self.score_tensor(tokens, self.as_tensors()).item()

    def save(self, path, extra_meta: Optional[dict] = None) -> None:
        meta = {
            "kind": "preference",
            "vocab_size": self.vocab_size,
            "config": self.cfg.to_json(),
            "margin": self.margin,
            "centering": self.centering,
        }
        if extra_meta:
            meta.update(extra_meta)
        save_checkpoint(path, self.arrays, meta)

    @classmethod
    def load(cls, path) -> "PreferenceModel":
        arrays, meta = load_checkpoint(path)
        if meta.get("kind") != "preference":
            raise ValueError("not a preference-model checkpoint")
        return cls(
            meta["vocab_size"],
            EncoderConfig.from_json(meta["config"]),
            arrays,
            margin=meta["margin"],
            centering=meta["centering"],
        )


def pm_loss_tensor(
    batch: Sequence[tuple[Sequence[int], Sequence[int]]],
    pm: PreferenceModel,
    t: dict,
) -> T.Tensor:
    if not batch:
        raise ValueError("empty batch")
    terms = []
    for pos, neg in batch:
        f_pos = pm.score_tensor(pos, t)
        f_neg = pm.score_tensor(neg, t)
        rank = T.mul(T.log_sigmoid(T.sub(T.sub(f_pos, f_neg), pm.margin)), -1.0)
        center = T.mul(T.square(T.add(f_pos, f_neg)), pm.centering)
        terms.append(T.reshape(T.add(rank, center), (1,)))
    return T.tmean(T.concat(terms, axis=0))


def pm_loss(
    batch: Sequence[tuple[Sequence[int], Sequence[int]]], pm: PreferenceModel
) -> float:
    return pm_loss_tensor(batch, pm, pm.as_tensors()).item()


def pm_loss_with_grads(
    batch: Sequence[tuple[Sequence[int], Sequence[int]]], pm: PreferenceModel
) -> tuple[float, dict[str, np.ndarray]]:
    t = pm.as_tensors(requires_grad=True)
    loss = pm_loss_tensor(batch, pm, t)
    loss.backward()
    grads = {k: v.grad for k, v in t.items() if v.grad is not None}
    return loss.item(), grads


def pairwise_accuracy(
    pairs: Sequence[tuple[Sequence[int], Sequence[int]]], pm: PreferenceModel
) -> float:
    if not pairs:
        return 0.0
    hits = sum(1 for pos, neg in pairs if pm.score(pos) > pm.score(neg))
    return hits / len(pairs)


def train_pm(
    positives: Sequence[Sequence[int]],
    negatives: Sequence[Sequence[int]],
    pm: PreferenceModel,
    steps: int,
    lr: float,
    seed: int = 0,
    heldout_fraction: float = 0.2,
) -> dict:
    """Full-batch Adam on the pairwise loss; reports held-out metrics."""
    if not positives or not negatives:
        raise ValueError("need both positive and negative examples")
    n = min(len(positives), len(negatives))
    pairs = [(tuple(positives[i]), tuple(negatives[i])) for i in range(n)]
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    n_held = int(n * heldout_fraction)
    held = [pairs[i] for i in order[:n_held]]
    train = [pairs[i] for i in order[n_held:]] or pairs

    opt = Adam(lr)
    last = pm_loss(train, pm)
    for _ in range(steps):
        last, grads = pm_loss_with_grads(train, pm)
        opt.step(pm.arrays, grads)
    return {
        "train_loss": last,
        "heldout_loss": pm_loss(held, pm) if held else None,
        "heldout_accuracy": pairwise_accuracy(held, pm) if held else None,
        "train_accuracy": pairwise_accuracy(train, pm),
        "steps": steps,
        "pairs": n,
    }


def combine_reward(log_p_lm: float, log_p_pm: float, cfg: RewardConfig) -> float:
    return math.exp(cfg.alpha * log_p_lm + (1.0 - cfg.alpha) * log_p_pm)


def reward(state: State, lm: TrigramLM, pm: PreferenceModel, cfg: RewardConfig) -> float:
    """Strictly positive reward of a terminated state."""
    if not state.terminated:
        raise ValueError("reward is defined on terminal states only")
    tokens = state.tokens()
    log_p_lm = lm.sequence_logprob(tokens, len(state.prefix))
    f = pm.score(tokens)
    log_p_pm = -float(np.logaddexp(0.0, -f))  # log sigmoid(f)
    return combine_reward(log_p_lm, log_p_pm, cfg)
