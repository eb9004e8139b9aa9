"""Discrete audio codec: frame encoder, residual vector quantizer, decoder."""

from .core import (
    Codebooks,
    Codec,
    CodecConfig,
    LatentFrames,
    TokenGrid,
    load_codec,
    save_codec,
)
from .tokens import flatten, read_tokens, unflatten, write_tokens
from .train import train_codec

__all__ = [
    "Codec", "CodecConfig", "Codebooks", "LatentFrames", "TokenGrid",
    "save_codec", "load_codec",
    "flatten", "unflatten", "read_tokens", "write_tokens",
    "train_codec",
]
