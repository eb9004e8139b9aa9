"""Frame-major token serialization and the binary token-file format.

Token file layout, little-endian: magic "UTOK", version u16, sample_rate u32,
frame_hop u32, n_q u8, codebook_size u16, T u32, then T*n_q token values as
u16 in frame-major order.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from ..errors import ValidationError
from .core import TokenGrid

_MAGIC = b"UTOK"
_VERSION = 1
_HEADER = "<4sHIIBHI"


def flatten(grid: TokenGrid) -> np.ndarray:
    """Frame-major serialization: z_1^1, z_1^2, ..., z_1^nq, z_2^1, ..."""
    return grid.tokens.reshape(-1).copy()


def unflatten(seq: np.ndarray, n_q: int, *, frame_hop_samples: int,
              sample_rate_hz: int, codebook_size: int) -> TokenGrid:
    seq = np.asarray(seq)
    if seq.ndim != 1:
        raise ValidationError(f"token sequence must be 1-D, got shape {seq.shape}")
    if n_q < 1:
        raise ValidationError(f"n_q must be >= 1, got {n_q}")
    if seq.size % n_q != 0:
        raise ValidationError(f"sequence length {seq.size} is not divisible by n_q={n_q}")
    return TokenGrid(tokens=seq.reshape(-1, n_q), n_q=n_q,
                     frame_hop_samples=frame_hop_samples,
                     sample_rate_hz=sample_rate_hz, codebook_size=codebook_size)


def write_tokens(path: str | Path, grid: TokenGrid) -> None:
    with open(path, "wb") as f:
        f.write(struct.pack(_HEADER, _MAGIC, _VERSION, grid.sample_rate_hz,
                            grid.frame_hop_samples, grid.n_q, grid.codebook_size,
                            grid.num_frames))
        f.write(flatten(grid).astype("<u2").tobytes())


def read_tokens(path: str | Path) -> TokenGrid:
    raw = Path(path).read_bytes()
    header_size = struct.calcsize(_HEADER)
    if len(raw) < header_size:
        raise ValidationError(f"{path}: truncated token file")
    magic, version, rate, hop, n_q, cb_size, t = struct.unpack_from(_HEADER, raw)
    if magic != _MAGIC:
        raise ValidationError(f"{path}: not a token file (bad magic)")
    if version != _VERSION:
        raise ValidationError(f"{path}: unsupported token file version {version}")
    count = t * n_q
    if len(raw) != header_size + 2 * count:
        raise ValidationError(
            f"{path}: payload is {len(raw) - header_size} bytes, expected {2 * count}")
    seq = np.frombuffer(raw, dtype="<u2", count=count, offset=header_size).astype(np.int64)
    return unflatten(seq, n_q, frame_hop_samples=hop, sample_rate_hz=rate,
                     codebook_size=cb_size)
