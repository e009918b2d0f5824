"""Subtrajectory-balance training with a reward-prioritized replay buffer.

The loss sums, over every ordered pair of sentence-complete states in a
trajectory, the squared log-ratio of the forward route (reward at the
earlier state, forward steps, termination at the later state) against the
backward route. State flow never appears explicitly: terminating a valid
state s has reward F(s) * P_F(terminal | s), which eliminates F.

Epoch one replays the corpus segmentations (optionally as likelihood
warm-up); later epochs mix online samples with replayed high-reward
trajectories under a Bernoulli switch.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import tape as T
from .corpus import CorpusIndex, split_prefix
from .dynvocab import DynamicVocabulary, TERMINAL_CONTENT, build_vocabulary
from .optim import make_optimizer
from .policy import (
    ActionScorer,
    PolicyParams,
    State,
    Trajectory,
    backward_suffixes,
    sample_trajectory,
)
from .reward import PreferenceModel, RewardConfig, TrigramLM, reward
from .segmentation import Segmentation, SegmentationConfig, segment_document
from .util import derive_seed


@dataclass(frozen=True)
class TrainConfig:
    pi: float = 0.8
    lr: float = 1e-3
    epochs: int = 5
    batch_size: int = 1
    buffer_capacity_per_prefix: int = 8
    sentence_end_ids: frozenset[int] = frozenset()
    max_len: int = 16
    warmup_mle: bool = True
    optimizer: str = "adam"

    def __post_init__(self):
        if not 0.0 <= self.pi <= 1.0:
            raise ValueError("pi must lie in [0, 1]")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.buffer_capacity_per_prefix < 1:
            raise ValueError("buffer capacity must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")


def is_valid_state(state: State, cfg: TrainConfig) -> bool:
    """True at s_0 (prefixes are whole sentences) or at a sentence boundary."""
    if not state.generated:
        return True
    return state.generated[-1] in cfg.sentence_end_ids


class ReplayBuffer:
    """Per-prefix pools of past trajectories, kept sorted by reward."""

    def __init__(self, capacity_per_prefix: int):
        if capacity_per_prefix < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity_per_prefix
        self._pools: dict[tuple[int, ...], list[tuple[Trajectory, float]]] = {}

    def insert(self, prefix: Sequence[int], traj: Trajectory, reward_value: float) -> None:
        if reward_value < 0:
            raise ValueError("rewards are non-negative")
        pool = self._pools.setdefault(tuple(prefix), [])
        pool.append((traj, reward_value))
        pool.sort(key=lambda item: -item[1])
        while len(pool) > self.capacity:
            pool.pop()

    def sample_probabilities(self, prefix: Sequence[int]) -> np.ndarray:
        pool = self._pools.get(tuple(prefix))
        if not pool:
            raise KeyError("unknown prefix")
        rewards = np.array([r for _, r in pool])
        total = rewards.sum()
        if total <= 0:
            return np.full(len(pool), 1.0 / len(pool))
        return rewards / total

    def sample(self, prefix: Sequence[int], rng: np.random.Generator) -> Trajectory:
        pool = self._pools.get(tuple(prefix))
        if not pool:
            raise KeyError("unknown prefix")
        probs = self.sample_probabilities(prefix)
        return pool[int(rng.choice(len(pool), p=probs))][0]

    def entries(self, prefix: Sequence[int]) -> list[tuple[Trajectory, float]]:
        return list(self._pools.get(tuple(prefix), []))

    def __contains__(self, prefix) -> bool:
        return tuple(prefix) in self._pools

    def __len__(self) -> int:
        return sum(len(p) for p in self._pools.values())


def buffer_insert(buffer: ReplayBuffer, prefix, traj, reward_value) -> None:
    buffer.insert(prefix, traj, reward_value)


def buffer_sample(buffer: ReplayBuffer, prefix, seed: int) -> Trajectory:
    return buffer.sample(prefix, np.random.default_rng(seed))


def offline_trajectory(
    segmentation: Segmentation,
    prefix_len: int,
    vocab: Optional[DynamicVocabulary] = None,
    max_len: Optional[int] = None,
) -> Trajectory:
    """Trajectory whose actions are the segmentation pieces of the residual.

    Pieces that straddle the prefix boundary, or whose content is missing
    from the vocabulary, fall back to single tokens; the action sequence is
    truncated at a piece boundary if it would exceed max_len.
    """
    doc_tokens = segmentation.token_ids()
    prefix = doc_tokens[:prefix_len]
    contents: list[tuple[int, ...]] = []
    pos = 0
    for piece in segmentation.pieces:
        end = pos + len(piece.tokens)
        if end <= prefix_len:
            pos = end
            continue
        tokens = piece.tokens[max(0, prefix_len - pos) :]
        straddles = pos < prefix_len
        if straddles or (vocab is not None and tokens not in vocab):
            contents.extend((t,) for t in tokens)
        else:
            contents.append(tokens)
        pos = end

    state = State(prefix)
    states = [state]
    actions: list[tuple[int, ...]] = []
    for content in contents:
        if max_len is not None and len(state.generated) + len(content) > max_len:
            break
        state = state.extend(content)
        states.append(state)
        actions.append(content)
    states.append(state.terminate())
    actions.append(TERMINAL_CONTENT)
    return Trajectory(states=states, actions=actions, step_logprobs=None)


def align_trajectory_to_vocab(traj: Trajectory, vocab: DynamicVocabulary) -> Trajectory:
    """Re-express a replayed trajectory using the current episode's vocabulary.

    Buffer pools are keyed by prefix, so a trajectory may carry span actions
    another episode's vocabulary lacks; those steps decompose into single
    tokens (always available), reaching the same terminal state.
    """
    if all(a in vocab for a in traj.actions):
        return traj
    state = State(traj.states[0].prefix)
    states = [state]
    actions: list[tuple[int, ...]] = []
    for action in traj.actions:
        if action == TERMINAL_CONTENT:
            break
        parts = [action] if action in vocab else [(t,) for t in action]
        for content in parts:
            state = state.extend(content)
            states.append(state)
            actions.append(content)
    states.append(state.terminate())
    actions.append(TERMINAL_CONTENT)
    return Trajectory(states=states, actions=actions, step_logprobs=None)


def _trajectory_logprob_tensors(
    traj: Trajectory,
    scorer: ActionScorer,
    need_terminal_at: Sequence[int],
) -> tuple[list[T.Tensor], dict[int, T.Tensor]]:
    """Step log-prob tensors A_1..A_n and terminal log-probs at chosen states."""
    inner = traj.inner_states
    n = len(inner) - 1
    terminal_at = set(need_terminal_at)
    step_lp: list[T.Tensor] = []
    term_lp: dict[int, T.Tensor] = {}
    for i, state in enumerate(inner):
        wanted = []
        if i < n:
            wanted.append(traj.actions[i])
        if i in terminal_at:
            wanted.append(TERMINAL_CONTENT)
        if not wanted:
            continue
        got = scorer.logprob_tensors(state, wanted)
        if i < n:
            step_lp.append(got[traj.actions[i]])
        if i in terminal_at:
            term_lp[i] = got[TERMINAL_CONTENT]
    return step_lp, term_lp


def subtb_loss_tensor(
    traj: Trajectory,
    scorer: ActionScorer,
    reward_fn: Callable[[State], float],
    cfg: TrainConfig,
) -> T.Tensor:
    inner = traj.inner_states
    n = len(inner) - 1
    valid = [i for i in range(n + 1) if is_valid_state(inner[i], cfg)]
    if len(valid) < 2:
        return T.Tensor(0.0)

    step_lp, term_lp = _trajectory_logprob_tensors(traj, scorer, valid)

    # Backward steps are uniform over matching suffixes, hence constants.
    log_b = np.zeros(n + 1)
    for k in range(1, n + 1):
        log_b[k] = -math.log(len(backward_suffixes(inner[k], scorer.vocab)))
    cum_b = np.cumsum(log_b)

    if n > 0:
        a_vec = T.concat([T.reshape(a, (1,)) for a in step_lp], axis=0)
        lower = np.tril(np.ones((n, n)))
        cum_a = T.concat([T.Tensor(np.zeros(1)), T.matmul(lower, a_vec)], axis=0)
    else:
        cum_a = T.Tensor(np.zeros(1))

    log_r = np.array([math.log(reward_fn(inner[i].terminate())) for i in valid])
    const = T.Tensor(log_r + cum_b[valid])
    sa_valid = T.gather_rows(cum_a, np.asarray(valid))
    t_vec = T.concat([T.reshape(term_lp[i], (1,)) for i in valid], axis=0)
    psi = T.sub(T.sub(const, sa_valid), t_vec)

    m = float(len(valid))
    return T.sub(T.mul(T.tsum(T.square(psi)), m), T.square(T.tsum(psi)))


def mle_loss_tensor(traj: Trajectory, scorer: ActionScorer) -> T.Tensor:
    """Negative mean trajectory log-likelihood, terminal step included."""
    inner = traj.inner_states
    n = len(inner) - 1
    step_lp, term_lp = _trajectory_logprob_tensors(traj, scorer, need_terminal_at=[n])
    parts = [T.reshape(t, (1,)) for t in step_lp] + [T.reshape(term_lp[n], (1,))]
    return T.mul(T.tmean(T.concat(parts, axis=0)), -1.0)


def subtb_loss(
    traj: Trajectory,
    vocab: DynamicVocabulary,
    params: PolicyParams,
    reward_fn: Callable[[State], float],
    cfg: TrainConfig,
) -> float:
    scorer = ActionScorer(vocab, params, cfg.max_len)
    return subtb_loss_tensor(traj, scorer, reward_fn, cfg).item()


def subtb_loss_with_grads(
    traj: Trajectory,
    vocab: DynamicVocabulary,
    params: PolicyParams,
    reward_fn: Callable[[State], float],
    cfg: TrainConfig,
) -> tuple[float, dict[str, np.ndarray]]:
    tensors = params.as_tensors(requires_grad=True)
    scorer = ActionScorer(vocab, params, cfg.max_len, tensors=tensors)
    loss = subtb_loss_tensor(traj, scorer, reward_fn, cfg)
    loss.backward()
    grads = {k: v.grad for k, v in tensors.items() if v.grad is not None}
    return loss.item(), grads


@dataclass
class TrainExample:
    doc_id: int
    threshold_index: int
    prefix: tuple[int, ...]
    residual: tuple[int, ...]
    segmentation: Segmentation


@dataclass
class TrainingData:
    examples: list[TrainExample]
    vocabs: dict[int, DynamicVocabulary]

    def prefixes(self) -> dict[int, tuple[int, ...]]:
        return {e.doc_id: e.prefix for e in self.examples}


def prepare_training_data(
    index: CorpusIndex,
    seg_cfg: SegmentationConfig,
    prefix_target_len: int,
    include_spans: bool = True,
    doc_ids: Optional[Sequence[int]] = None,
) -> TrainingData:
    """Segment the training documents and build their episode vocabularies.

    ``doc_ids`` restricts the episode loop to a corpus subset; retrieval,
    spans, and reward models still see the whole index. References for
    segmentation are the document plus its nearest neighbors; the
    vocabulary is conditioned on the prefix with the document itself
    always among the sources.
    """
    end_ids = index.vocab.sentence_end_ids()
    examples: list[TrainExample] = []
    vocabs: dict[int, DynamicVocabulary] = {}
    k = index.k_train
    docs = (
        index.documents
        if doc_ids is None
        else [index.documents[i] for i in doc_ids]
    )
    for doc in docs:
        prefix, residual = split_prefix(doc.tokens, prefix_target_len, end_ids)
        neighbors = [j for j in index.retrieve(doc.tokens, k + 1) if j != doc.doc_id][:k]
        refs = [doc] + [index.documents[j] for j in neighbors]
        vocabs[doc.doc_id] = build_vocabulary(
            prefix, index, k, seg_cfg,
            extra_doc_ids=[doc.doc_id], include_spans=include_spans,
        )
        for seg in segment_document(doc, refs, seg_cfg):
            examples.append(
                TrainExample(doc.doc_id, seg.threshold_index, prefix, residual, seg)
            )
    return TrainingData(examples=examples, vocabs=vocabs)


class _RewardMemo:
    def __init__(self, lm: TrigramLM, pm: PreferenceModel, cfg: RewardConfig):
        self.lm, self.pm, self.cfg = lm, pm, cfg
        self._cache: dict[tuple, float] = {}

    def __call__(self, state: State) -> float:
        key = (state.prefix, state.generated)
        hit = self._cache.get(key)
        if hit is None:
            hit = self._cache[key] = reward(state, self.lm, self.pm, self.cfg)
        return hit


def train_epoch(
    data: TrainingData,
    index: CorpusIndex,
    params: PolicyParams,
    lm: TrigramLM,
    pm: PreferenceModel,
    buffer: ReplayBuffer,
    cfg: TrainConfig,
    epoch_no: int,
    seed: int,
    reward_cfg: Optional[RewardConfig] = None,
    opt=None,
    reward_fn: Optional[Callable[[State], float]] = None,
    step_offset: int = 0,
    log: Optional[list] = None,
    max_steps: Optional[int] = None,
) -> dict:
    """One pass over the segmented corpus; updates ``params`` in place."""
    if epoch_no < 1:
        raise ValueError("epochs are 1-based")
    if opt is None:
        opt = make_optimizer(cfg.optimizer, cfg.lr)
    if reward_fn is None:
        reward_fn = _RewardMemo(lm, pm, reward_cfg or RewardConfig())
    rng = np.random.default_rng(derive_seed(seed, "epoch", epoch_no))

    losses: list[float] = []
    rewards: list[float] = []
    online_flags: list[bool] = []
    pending: dict[str, np.ndarray] = {}
    pending_count = 0
    step = step_offset

    for example in data.examples:
        if max_steps is not None and len(losses) >= max_steps:
            break
        vocab = data.vocabs[example.doc_id]
        prefix = example.prefix
        online = False
        if epoch_no == 1:
            traj = offline_trajectory(
                example.segmentation, len(prefix), vocab=vocab, max_len=cfg.max_len
            )
        elif rng.random() < cfg.pi:
            online = True
            traj = sample_trajectory(prefix, vocab, params, cfg.max_len, rng=rng)
        else:
            traj = align_trajectory_to_vocab(buffer.sample(prefix, rng), vocab)
        reward_value = reward_fn(traj.final_state)
        if epoch_no == 1 or online:
            buffer.insert(prefix, traj, reward_value)

        tensors = params.as_tensors(requires_grad=True)
        scorer = ActionScorer(vocab, params, cfg.max_len, tensors=tensors)
        if epoch_no == 1 and cfg.warmup_mle:
            loss_t = mle_loss_tensor(traj, scorer)
        else:
            loss_t = subtb_loss_tensor(traj, scorer, reward_fn, cfg)
        loss_t.backward()
        for name, tensor in tensors.items():
            if tensor.grad is not None:
                acc = pending.get(name)
                pending[name] = tensor.grad if acc is None else acc + tensor.grad
        pending_count += 1
        if pending_count >= cfg.batch_size:
            opt.step(params.arrays, {k: g / pending_count for k, g in pending.items()})
            pending, pending_count = {}, 0

        step += 1
        loss_value = loss_t.item()
        losses.append(loss_value)
        rewards.append(reward_value)
        online_flags.append(online)
        if log is not None:
            log.append(
                {
                    "epoch": epoch_no,
                    "step": step,
                    "loss": loss_value,
                    "mean_reward": reward_value,
                    "online": online,
                }
            )

    if pending:
        opt.step(params.arrays, {k: g / pending_count for k, g in pending.items()})

    return {
        "epoch": epoch_no,
        "steps": len(losses),
        "mean_loss": float(np.mean(losses)) if losses else 0.0,
        "mean_reward": float(np.mean(rewards)) if rewards else 0.0,
        "online_fraction": float(np.mean(online_flags)) if online_flags else 0.0,
    }


def train(
    data: TrainingData,
    index: CorpusIndex,
    params: PolicyParams,
    lm: TrigramLM,
    pm: PreferenceModel,
    cfg: TrainConfig,
    seed: int,
    reward_cfg: Optional[RewardConfig] = None,
    max_steps: Optional[int] = None,
    log: Optional[list] = None,
    checkpoint_every: int = 0,
    checkpoint_fn: Optional[Callable[[int], None]] = None,
) -> tuple[ReplayBuffer, list[dict]]:
    """Run the full hybrid loop for cfg.epochs (or until max_steps)."""
    buffer = ReplayBuffer(cfg.buffer_capacity_per_prefix)
    opt = make_optimizer(cfg.optimizer, cfg.lr)
    reward_fn = _RewardMemo(lm, pm, reward_cfg or RewardConfig())
    epoch_stats: list[dict] = []
    steps_done = 0
    for epoch_no in range(1, cfg.epochs + 1):
        if max_steps is not None and steps_done >= max_steps:
            break
        remaining = None if max_steps is None else max_steps - steps_done
        stats = train_epoch(
            data, index, params, lm, pm, buffer, cfg, epoch_no, seed,
            reward_cfg=reward_cfg, opt=opt, reward_fn=reward_fn,
            step_offset=steps_done, log=log, max_steps=remaining,
        )
        steps_done += stats["steps"]
        epoch_stats.append(stats)
        if checkpoint_every and checkpoint_fn and epoch_no % checkpoint_every == 0:
            checkpoint_fn(epoch_no)
    return buffer, epoch_stats
