"""Synthetic-mixture simulation, training loops, separation, and scoring."""

from .data import (
    SEPARATE_PROMPT,
    WINDOWED_PROMPT,
    DataConfig,
    MixtureTriple,
    build_codec_corpus,
    read_triples,
    simulate_triples,
    write_triples,
)
from .evaluate import (
    EvalItem,
    EvalReport,
    PromptSwapItem,
    PromptSwapReport,
    codec_reference,
    evaluate,
    prompt_relevance,
    run_separations,
    score_outputs,
    swapped_prompt,
    write_report,
)
from .inference import SEPARATION_SAMPLING, SeparationResult, separate
from .train import (
    TrainConfig,
    TrainLog,
    batch_loss,
    build_separation_layouts,
    check_codec_model_match,
    load_trainer_state,
    pack_batches,
    pretrain,
    save_trainer_state,
    train_separation,
)

__all__ = [
    "SEPARATE_PROMPT",
    "WINDOWED_PROMPT",
    "SEPARATION_SAMPLING",
    "DataConfig",
    "EvalItem",
    "EvalReport",
    "MixtureTriple",
    "PromptSwapItem",
    "PromptSwapReport",
    "SeparationResult",
    "TrainConfig",
    "TrainLog",
    "batch_loss",
    "build_codec_corpus",
    "build_separation_layouts",
    "check_codec_model_match",
    "codec_reference",
    "evaluate",
    "load_trainer_state",
    "pack_batches",
    "pretrain",
    "prompt_relevance",
    "read_triples",
    "run_separations",
    "save_trainer_state",
    "score_outputs",
    "separate",
    "simulate_triples",
    "swapped_prompt",
    "train_separation",
    "write_triples",
]
