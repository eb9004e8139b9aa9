"""Frame/slot two-level transformer: training forward and cached decoding."""

from .core import (
    REFERENCE_CONFIG,
    ModelConfig,
    forward,
    frame_attention_mask,
    init_model_params,
    load_model,
    param_shapes,
    save_model,
    sequence_loss,
)
from .infer import (
    GREEDY,
    GenerateResult,
    Sampling,
    generate,
    incremental_logits,
)

__all__ = [
    "REFERENCE_CONFIG",
    "ModelConfig",
    "forward",
    "frame_attention_mask",
    "init_model_params",
    "load_model",
    "param_shapes",
    "save_model",
    "sequence_loss",
    "GREEDY",
    "GenerateResult",
    "Sampling",
    "generate",
    "incremental_logits",
]
