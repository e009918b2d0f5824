"""Span-level text generation trained as a GFlowNet over a DAG of segmentations."""

from .corpus import (
    CorpusIndex,
    Document,
    Vocabulary,
    build_fixed_vocab,
    split_prefix,
    tokenize,
)
from .dynvocab import DynamicVocabulary, SpanAction, build_vocabulary, extract_spans
from .oracle import (
    EnumeratedSpace,
    count_segmentations,
    choose_option,
    diversity,
    enumerate_terminal_states,
    exact_terminal_distribution,
    marginal_likelihood,
    tv_distance,
)
from .policy import (
    EncoderConfig,
    PolicyParams,
    State,
    Trajectory,
    backward_policy,
    encode_prefix,
    encode_spans,
    forward_policy,
    sample_trajectory,
)
from .reward import (
    PreferenceModel,
    RewardConfig,
    TrigramLM,
    fit_trigram_lm,
    lm_logprob,
    pm_loss,
    reward,
    train_pm,
)
from .segmentation import (
    Segmentation,
    SegmentationConfig,
    longest_match,
    segment_document,
)
from .trainer import (
    ReplayBuffer,
    TrainConfig,
    is_valid_state,
    offline_trajectory,
    prepare_training_data,
    subtb_loss,
    train,
    train_epoch,
)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
