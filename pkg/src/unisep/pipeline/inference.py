"""End-to-end separation: waveforms in, separated waveform out."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ValidationError
from ..model.core import ModelConfig
from ..model.infer import Sampling, generate
from ..sequence import CAUSAL, build_separation_prefix
from ..signal import Waveform
from .train import check_codec_model_match

# Default decoding rule for separation runs; tests and deterministic
# evaluations pass greedy explicitly.
SEPARATION_SAMPLING = Sampling(kind="top_k", top_k=30, temperature=0.8)


@dataclass(frozen=True)
class SeparationResult:
    waveform: Waveform
    truncated: bool  # generation hit its frame budget without the end marker
    generated_frames: int


def separate(store, model_config: ModelConfig, codec, mixture: Waveform,
             prompt: Waveform, *, sampling: Sampling = SEPARATION_SAMPLING,
             seed: int = 0, attention_mode: str = CAUSAL,
             max_new_frames: int | None = None) -> SeparationResult:
    """Tokenize mixture and prompt, generate target tokens, decode.

    A generation that stops immediately (zero frames) decodes to silence of
    the mixture's length so downstream metrics stay well-defined.
    """
    check_codec_model_match(codec, model_config)
    m = codec.tokenize(mixture)
    c = codec.tokenize(prompt)
    vocab = model_config.vocabulary()
    prefix = build_separation_prefix(vocab, m, c)
    prefix_frames = prefix.ids.shape[0] // model_config.n_q
    if prefix_frames + 1 > model_config.max_frames:
        raise ValidationError(
            f"mixture+prompt span {prefix_frames} frames; the model context "
            f"of {model_config.max_frames} frames leaves no room to generate")

    res = generate(prefix, store, model_config,
                   frame_hop_samples=codec.config.frame_hop_samples,
                   sample_rate_hz=codec.config.sample_rate_hz,
                   sampling=sampling, max_new_frames=max_new_frames,
                   seed=seed, attention_mode=attention_mode)
    if res.num_frames == 0:
        wave = Waveform(np.zeros(len(mixture)), mixture.sample_rate_hz)
    else:
        wave = codec.decode(res.grid)
    return SeparationResult(waveform=wave, truncated=res.truncated,
                            generated_frames=res.num_frames)
