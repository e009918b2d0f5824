"""Command-line entry point.

Commands: index, segment, train-reward, train, sample, eval-exact,
eval-likelihood, eval-diversity, qa. Configuration is an INI file of
key = value sections; every run derives all randomness from the single
[run] seed and writes a manifest carrying the config hash, so identical
config plus seed reproduces identical artifacts byte for byte.

Exit codes: 0 success, 2 configuration error, 3 runtime error.
"""
from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import os
import sys
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .corpus import CorpusIndex, load_corpus_lines, split_prefix, tokenize
from .dynvocab import build_vocabulary
from .oracle import (
    diversity,
    choose_option,
    enumerate_terminal_states,
    exact_terminal_distribution,
    marginal_likelihood,
    reward_target_distribution,
    tv_distance,
)
from .policy import EncoderConfig, PolicyParams, State, sample_trajectory
from .reward import (
    PreferenceModel,
    RewardConfig,
    TrigramLM,
    reward,
    train_pm,
)
from .segmentation import SegmentationConfig, segment_document, segmentation_record
from .trainer import TrainConfig, prepare_training_data, train
from .util import derive_seed

COMMANDS = (
    "index",
    "segment",
    "train-reward",
    "train",
    "sample",
    "eval-exact",
    "eval-likelihood",
    "eval-diversity",
    "qa",
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


class ConfigError(Exception):
    pass


class RuntimeFailure(Exception):
    pass


@dataclass
class RunConfig:
    path: str
    config_hash: str
    seed: int
    output_dir: str
    corpus_file: str
    k_train: int
    k_infer: int
    prefix_target_len: int
    seg: SegmentationConfig
    policy: EncoderConfig
    reward_cfg: RewardConfig
    delta: float
    margin: float
    centering: float
    pm_steps: int
    pm_lr: float
    pm_encoder: EncoderConfig
    pi: float
    lr: float
    epochs: int
    batch_size: int
    buffer_capacity: int
    max_len: int
    sentence_end_tokens: str
    warmup_mle: bool
    optimizer: str
    use_spans: bool
    max_steps: int
    checkpoint_every: int
    num_samples: int
    sample_mode: str
    prompts_file: str
    eval_prefix: str
    eval_prefix_doc: int
    enumeration_bound: int
    texts_file: str
    options_file: str
    samples_file: str


def _get(parser, section, key, cast, default):
    try:
        raw = parser.get(section, key, fallback=None)
        if raw is None or raw == "":
            if default is None:
                raise ConfigError(f"missing required config value [{section}] {key}")
            return default
        if cast is bool:
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        return cast(raw)
    except ConfigError:
        raise
    except Exception as exc:
        raise ConfigError(f"bad config value [{section}] {key}: {exc}") from exc


def load_config(path: str) -> RunConfig:
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    with open(path, "rb") as fh:
        blob = fh.read()
    config_hash = hashlib.sha256(blob).hexdigest()[:16]
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(blob.decode("utf-8"))
    except Exception as exc:
        raise ConfigError(f"cannot parse config: {exc}") from exc

    thresholds = _get(parser, "segmentation", "thresholds", str, "0.0, 0.3, 0.6")
    try:
        thr = tuple(float(x) for x in thresholds.replace(",", " ").split())
        seg = SegmentationConfig(
            l_min=_get(parser, "segmentation", "l_min", int, 2),
            l_max=_get(parser, "segmentation", "l_max", int, 8),
            thresholds=thr,
            rng_seed=_get(parser, "run", "seed", int, 0),
        )
        policy = EncoderConfig(
            d_model=_get(parser, "policy", "d_model", int, 64),
            n_layers=_get(parser, "policy", "n_layers", int, 2),
            n_heads=_get(parser, "policy", "n_heads", int, 4),
            ff_mult=_get(parser, "policy", "ff_mult", int, 4),
            context_limit=_get(parser, "policy", "context_limit", int, 128),
        )
        pm_encoder = EncoderConfig(
            d_model=_get(parser, "reward", "pm_d_model", int, 32),
            n_layers=_get(parser, "reward", "pm_n_layers", int, 1),
            n_heads=_get(parser, "reward", "pm_n_heads", int, 2),
            ff_mult=_get(parser, "reward", "pm_ff_mult", int, 2),
            context_limit=_get(parser, "policy", "context_limit", int, 128),
        )
        reward_cfg = RewardConfig(alpha=_get(parser, "reward", "alpha", float, 0.5))
    except (ValueError, ConfigError) as exc:
        raise ConfigError(str(exc)) from exc

    return RunConfig(
        path=path,
        config_hash=config_hash,
        seed=_get(parser, "run", "seed", int, 0),
        output_dir=_get(parser, "run", "output_dir", str, "runs/out"),
        corpus_file=_get(parser, "corpus", "corpus_file", str, None),
        k_train=_get(parser, "corpus", "k_train", int, 8),
        k_infer=_get(parser, "corpus", "k_infer", int, 16),
        prefix_target_len=_get(parser, "corpus", "prefix_target_len", int, 32),
        seg=seg,
        policy=policy,
        reward_cfg=reward_cfg,
        delta=_get(parser, "reward", "delta", float, 0.1),
        margin=_get(parser, "reward", "margin", float, 0.0),
        centering=_get(parser, "reward", "centering", float, 0.01),
        pm_steps=_get(parser, "reward", "pm_steps", int, 100),
        pm_lr=_get(parser, "reward", "pm_lr", float, 1e-3),
        pm_encoder=pm_encoder,
        pi=_get(parser, "train", "pi", float, 0.8),
        lr=_get(parser, "train", "lr", float, 1e-3),
        epochs=_get(parser, "train", "epochs", int, 5),
        batch_size=_get(parser, "train", "batch_size", int, 1),
        buffer_capacity=_get(parser, "train", "buffer_capacity", int, 8),
        max_len=_get(parser, "train", "max_len", int, 16),
        sentence_end_tokens=_get(parser, "train", "sentence_end_tokens", str, ". ! ?"),
        warmup_mle=_get(parser, "train", "warmup_mle", bool, True),
        optimizer=_get(parser, "train", "optimizer", str, "adam"),
        use_spans=_get(parser, "train", "use_spans", bool, True),
        max_steps=_get(parser, "train", "max_steps", int, 0),
        checkpoint_every=_get(parser, "train", "checkpoint_every", int, 0),
        num_samples=_get(parser, "sample", "num_samples", int, 4),
        sample_mode=_get(parser, "sample", "mode", str, "ancestral"),
        prompts_file=_get(parser, "sample", "prompts_file", str, ""),
        eval_prefix=_get(parser, "eval", "prefix", str, ""),
        eval_prefix_doc=_get(parser, "eval", "prefix_doc", int, 0),
        enumeration_bound=_get(parser, "eval", "enumeration_bound", int, 10**6),
        texts_file=_get(parser, "eval", "texts_file", str, ""),
        options_file=_get(parser, "eval", "options_file", str, ""),
        samples_file=_get(parser, "eval", "samples_file", str, ""),
    )


def _out(cfg: RunConfig, name: str) -> str:
    os.makedirs(cfg.output_dir, exist_ok=True)
    return os.path.join(cfg.output_dir, name)


def _dump_json(path: str, payload: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True)
        fh.write("\n")


def _dump_jsonl(path: str, header: dict, records: Sequence[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def _read_jsonl(path: str) -> list[dict]:
    if not os.path.exists(path):
        raise RuntimeFailure(f"missing input file: {path}")
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(json.loads(line))
    return out


def _header(cfg: RunConfig) -> dict:
    return {"config_hash": cfg.config_hash, "seed": cfg.seed}


def _manifest(cfg: RunConfig, command: str, outputs: Sequence[str], extra: Optional[dict] = None) -> None:
    payload = {
        "command": command,
        "config_hash": cfg.config_hash,
        "seed": cfg.seed,
        "outputs": sorted(os.path.basename(o) for o in outputs),
    }
    if extra:
        payload.update(extra)
    _dump_json(_out(cfg, f"manifest_{command.replace('-', '_')}.json"), payload)


def _load_index(cfg: RunConfig) -> CorpusIndex:
    path = _out(cfg, "index.json")
    if not os.path.exists(path):
        raise RuntimeFailure("index.json not found; run the index command first")
    return CorpusIndex.load(path)


def _load_models(cfg: RunConfig) -> tuple[TrigramLM, PreferenceModel]:
    lm_path, pm_path = _out(cfg, "lm.json"), _out(cfg, "pm.npz")
    if not os.path.exists(lm_path) or not os.path.exists(pm_path):
        raise RuntimeFailure("reward models not found; run train-reward first")
    return TrigramLM.load(lm_path), PreferenceModel.load(pm_path)


def _load_policy(cfg: RunConfig) -> PolicyParams:
    path = _out(cfg, "policy.npz")
    if not os.path.exists(path):
        raise RuntimeFailure("policy.npz not found; run train first")
    return PolicyParams.load(path)


def _sentence_end_ids(cfg: RunConfig, index: CorpusIndex) -> frozenset[int]:
    spec = cfg.sentence_end_tokens.strip()
    if spec == "*":
        return frozenset(index.vocab.token_ids())
    ids = set()
    for surface in spec.split():
        if surface in index.vocab:
            ids.add(index.vocab.index[surface])
    return frozenset(ids)


def _train_config(cfg: RunConfig, index: CorpusIndex) -> TrainConfig:
    return TrainConfig(
        pi=cfg.pi,
        lr=cfg.lr,
        epochs=cfg.epochs,
        batch_size=cfg.batch_size,
        buffer_capacity_per_prefix=cfg.buffer_capacity,
        sentence_end_ids=_sentence_end_ids(cfg, index),
        max_len=cfg.max_len,
        warmup_mle=cfg.warmup_mle,
        optimizer=cfg.optimizer,
    )


def _eval_prefix(cfg: RunConfig, index: CorpusIndex) -> tuple[int, ...]:
    if cfg.eval_prefix:
        ids = tuple(tokenize(cfg.eval_prefix, index.vocab))
        if not ids:
            raise RuntimeFailure("eval prefix tokenizes to nothing")
        return ids
    doc = index.documents[cfg.eval_prefix_doc]
    prefix, _ = split_prefix(
        doc.tokens, cfg.prefix_target_len, index.vocab.sentence_end_ids()
    )
    return prefix


def cmd_index(cfg: RunConfig) -> None:
    if not os.path.exists(cfg.corpus_file):
        raise RuntimeFailure(f"corpus file not found: {cfg.corpus_file}")
    lines = load_corpus_lines(cfg.corpus_file)
    index = CorpusIndex.build(lines, k_train=cfg.k_train, k_infer=cfg.k_infer)
    index.save(_out(cfg, "index.json"))
    index.vocab.save(_out(cfg, "vocab.txt"))
    _manifest(
        cfg, "index", ["index.json", "vocab.txt"],
        {"documents": len(index.documents), "vocab_size": len(index.vocab)},
    )


def cmd_segment(cfg: RunConfig) -> None:
    index = _load_index(cfg)
    records = []
    for doc in index.documents:
        neighbors = [
            j for j in index.retrieve(doc.tokens, cfg.k_train + 1) if j != doc.doc_id
        ][: cfg.k_train]
        refs = [doc] + [index.documents[j] for j in neighbors]
        for seg in segment_document(doc, refs, cfg.seg):
            records.append(segmentation_record(seg, index.vocab.surfaces))
    path = _out(cfg, "segmentations.jsonl")
    _dump_jsonl(path, _header(cfg), records)
    _manifest(cfg, "segment", [path], {"records": len(records)})


def cmd_train_reward(cfg: RunConfig) -> None:
    index = _load_index(cfg)
    lm = TrigramLM.fit([d.tokens for d in index.documents], cfg.delta, len(index.vocab))
    lm.save(_out(cfg, "lm.json"))

    end_ids = index.vocab.sentence_end_ids()
    init_params = PolicyParams.init(
        len(index.vocab), cfg.policy, derive_seed(cfg.seed, "init-policy")
    )
    pairs = []
    for doc in index.documents:
        prefix, residual = split_prefix(doc.tokens, cfg.prefix_target_len, end_ids)
        vocab = build_vocabulary(
            prefix, index, cfg.k_train, cfg.seg,
            extra_doc_ids=[doc.doc_id], include_spans=cfg.use_spans,
        )
        traj = sample_trajectory(
            prefix, vocab, init_params, cfg.max_len,
            seed=derive_seed(cfg.seed, "pm-negative", doc.doc_id),
        )
        positive = prefix + residual[: cfg.max_len]
        negative = traj.final_state.tokens()
        pairs.append({"positive": list(positive), "negative": list(negative)})
    _dump_jsonl(_out(cfg, "pm_pairs.jsonl"), _header(cfg), pairs)

    pm = PreferenceModel.init(
        len(index.vocab), cfg.pm_encoder, derive_seed(cfg.seed, "pm-init"),
        margin=cfg.margin, centering=cfg.centering,
    )
    stats = train_pm(
        [tuple(p["positive"]) for p in pairs],
        [tuple(p["negative"]) for p in pairs],
        pm, steps=cfg.pm_steps, lr=cfg.pm_lr,
        seed=derive_seed(cfg.seed, "pm-train"),
    )
    pm.save(_out(cfg, "pm.npz"), extra_meta={"config_hash": cfg.config_hash})
    _manifest(
        cfg, "train-reward", ["lm.json", "pm.npz", "pm_pairs.jsonl"], {"pm": stats}
    )


def cmd_train(cfg: RunConfig) -> None:
    index = _load_index(cfg)
    lm, pm = _load_models(cfg)
    train_cfg = _train_config(cfg, index)
    data = prepare_training_data(
        index, cfg.seg, cfg.prefix_target_len, include_spans=cfg.use_spans
    )
    params = PolicyParams.init(
        len(index.vocab), cfg.policy, derive_seed(cfg.seed, "policy-init")
    )
    log: list[dict] = []
    checkpoint_path = _out(cfg, "policy.npz")

    def save_ckpt(epoch_no: int) -> None:
        params.save(checkpoint_path, extra_meta={"config_hash": cfg.config_hash, "epoch": epoch_no})

    _, epoch_stats = train(
        data, index, params, lm, pm, train_cfg, cfg.seed,
        reward_cfg=cfg.reward_cfg,
        max_steps=cfg.max_steps or None,
        log=log,
        checkpoint_every=cfg.checkpoint_every,
        checkpoint_fn=save_ckpt if cfg.checkpoint_every else None,
    )
    params.save(checkpoint_path, extra_meta={"config_hash": cfg.config_hash})
    _dump_jsonl(_out(cfg, "train_log.jsonl"), _header(cfg), log)
    _manifest(
        cfg, "train", ["policy.npz", "train_log.jsonl"], {"epochs": epoch_stats}
    )


def cmd_sample(cfg: RunConfig) -> None:
    index = _load_index(cfg)
    params = _load_policy(cfg)
    end_ids = index.vocab.sentence_end_ids()
    if cfg.prompts_file:
        prompts = [
            tuple(tokenize(line, index.vocab))
            for line in load_corpus_lines(cfg.prompts_file)
        ]
    else:
        prompts = [
            split_prefix(d.tokens, cfg.prefix_target_len, end_ids)[0]
            for d in index.documents
        ]
    greedy = cfg.sample_mode == "greedy"
    records = []
    for pi_, prompt in enumerate(prompts):
        vocab = build_vocabulary(
            prompt, index, cfg.k_infer, cfg.seg, include_spans=cfg.use_spans
        )
        n = 1 if greedy else cfg.num_samples
        for j in range(n):
            traj = sample_trajectory(
                prompt, vocab, params, cfg.max_len,
                seed=derive_seed(cfg.seed, "sample", pi_, j),
                greedy=greedy,
            )
            gen = traj.final_state.generated
            records.append(
                {
                    "prompt": index.vocab.decode(prompt),
                    "continuation": index.vocab.decode(gen),
                    "tokens": list(gen),
                    "logprob": traj.log_probability(),
                }
            )
    path = _out(cfg, "samples.jsonl")
    _dump_jsonl(path, _header(cfg), records)
    _manifest(cfg, "sample", [path], {"prompts": len(prompts), "mode": cfg.sample_mode})


def cmd_eval_exact(cfg: RunConfig) -> None:
    index = _load_index(cfg)
    lm, pm = _load_models(cfg)
    params = _load_policy(cfg)
    prefix = _eval_prefix(cfg, index)
    vocab = build_vocabulary(
        prefix, index, cfg.k_infer, cfg.seg, include_spans=cfg.use_spans
    )
    exact = exact_terminal_distribution(
        vocab, params, prefix, cfg.max_len, bound=cfg.enumeration_bound
    )
    rewards = {
        gen: reward(State(prefix, gen, terminated=True), lm, pm, cfg.reward_cfg)
        for gen in exact
    }
    target = reward_target_distribution(rewards)
    tv = tv_distance(exact, target)

    def dump_dist(dist: dict) -> dict:
        return {index.vocab.decode(k): v for k, v in sorted(dist.items())}

    _dump_json(
        _out(cfg, "exact_dist.json"),
        {"config_hash": cfg.config_hash, "distribution": dump_dist(exact)},
    )
    _dump_json(
        _out(cfg, "target_dist.json"),
        {"config_hash": cfg.config_hash, "distribution": dump_dist(target)},
    )
    report = {
        "config_hash": cfg.config_hash,
        "tv_distance": tv,
        "n_terminals": len(exact),
        "z": sum(rewards.values()),
        "prefix": index.vocab.decode(prefix),
    }
    _dump_json(_out(cfg, "eval_exact.json"), report)
    _manifest(
        cfg, "eval-exact",
        ["eval_exact.json", "exact_dist.json", "target_dist.json"],
        {"tv_distance": tv},
    )


def cmd_eval_likelihood(cfg: RunConfig) -> None:
    index = _load_index(cfg)
    params = _load_policy(cfg)
    if not cfg.texts_file:
        raise ConfigError("eval-likelihood needs [eval] texts_file")
    records = []
    for rec in _read_jsonl(cfg.texts_file):
        prompt = tuple(tokenize(rec["prompt"], index.vocab))
        text = tuple(tokenize(rec["text"], index.vocab))
        vocab = build_vocabulary(
            prompt, index, cfg.k_infer, cfg.seg, include_spans=cfg.use_spans
        )
        lik = marginal_likelihood(text, vocab, params, prompt, cfg.max_len)
        records.append(
            {"prompt": rec["prompt"], "text": rec["text"], "likelihood": lik}
        )
    path = _out(cfg, "likelihoods.jsonl")
    _dump_jsonl(path, _header(cfg), records)
    _manifest(cfg, "eval-likelihood", [path], {"records": len(records)})


def cmd_eval_diversity(cfg: RunConfig) -> None:
    index = _load_index(cfg)
    src = cfg.samples_file or _out(cfg, "samples.jsonl")
    rows = _read_jsonl(src)
    scores = []
    for rec in rows:
        if "tokens" in rec:
            scores.append(diversity(tuple(rec["tokens"])))
        elif "continuation" in rec:
            scores.append(diversity(tuple(tokenize(rec["continuation"], index.vocab))))
    payload = {
        "config_hash": cfg.config_hash,
        "mean_diversity": float(np.mean(scores)) if scores else None,
        "scores": scores,
        "source": os.path.basename(src),
    }
    _dump_json(_out(cfg, "diversity.json"), payload)
    _manifest(cfg, "eval-diversity", ["diversity.json"], {"n": len(scores)})


def cmd_qa(cfg: RunConfig) -> None:
    index = _load_index(cfg)
    params = _load_policy(cfg)
    if not cfg.options_file:
        raise ConfigError("qa needs [eval] options_file")
    records = []
    correct, graded = 0, 0
    for rec in _read_jsonl(cfg.options_file):
        prompt = tuple(tokenize(rec["prompt"], index.vocab))
        options = [tuple(tokenize(o, index.vocab)) for o in rec["options"]]
        vocab = build_vocabulary(
            prompt, index, cfg.k_infer, cfg.seg, include_spans=cfg.use_spans
        )
        pick = choose_option(prompt, options, vocab, params, cfg.max_len)
        row = {"prompt": rec["prompt"], "prediction": pick}
        if "answer_index" in rec and rec["answer_index"] is not None:
            graded += 1
            row["answer_index"] = rec["answer_index"]
            row["correct"] = pick == rec["answer_index"]
            correct += int(row["correct"])
        records.append(row)
    path = _out(cfg, "qa_results.jsonl")
    _dump_jsonl(path, _header(cfg), records)
    accuracy = correct / graded if graded else None
    _manifest(cfg, "qa", [path], {"accuracy": accuracy, "graded": graded})


_HANDLERS = {
    "index": cmd_index,
    "segment": cmd_segment,
    "train-reward": cmd_train_reward,
    "train": cmd_train,
    "sample": cmd_sample,
    "eval-exact": cmd_eval_exact,
    "eval-likelihood": cmd_eval_likelihood,
    "eval-diversity": cmd_eval_diversity,
    "qa": cmd_qa,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = argparse.ArgumentParser(
        prog="spanflow",
        description="Span-level GFlowNet text generation over a DAG state space.",
    )
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", required=True, help="INI configuration file")
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        cfg = load_config(args.config)
        _HANDLERS[args.command](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except RuntimeFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
