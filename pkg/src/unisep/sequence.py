"""Token vocabulary and sequence layouts for the language model.

Audio codes are offset per quantizer stage so every (stage, code) pair owns
a distinct id; special tokens sit above the audio range. All layouts stay
frame-aligned: specials are repeated n_q times so each occupies one frame,
which keeps the multi-scale model's frame grid uniform.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from .codec import TokenGrid
from .errors import ValidationError
from .rng import stream

CAUSAL = "causal"
PREFIX = "prefix"

_SPECIAL_NAMES = ("a_start", "a_end", "p_start", "p_end", "mask", "pad")


class Segment(IntEnum):
    MIX = 0
    PROMPT = 1
    TARGET = 2
    SPECIAL = 3
    MASKED_SRC = 4
    RECON = 5


@dataclass(frozen=True)
class Vocabulary:
    n_q: int
    codebook_size: int

    def __post_init__(self):
        if self.n_q < 1 or self.codebook_size < 2:
            raise ValidationError(
                f"vocabulary needs n_q >= 1 and codebook_size >= 2, "
                f"got {self.n_q}, {self.codebook_size}")

    @property
    def audio_size(self) -> int:
        return self.n_q * self.codebook_size

    @property
    def a_start(self) -> int:
        return self.audio_size

    @property
    def a_end(self) -> int:
        return self.audio_size + 1

    @property
    def p_start(self) -> int:
        return self.audio_size + 2

    @property
    def p_end(self) -> int:
        return self.audio_size + 3

    @property
    def mask_id(self) -> int:
        return self.audio_size + 4

    @property
    def pad_id(self) -> int:
        return self.audio_size + 5

    @property
    def vocab_size(self) -> int:
        return self.audio_size + len(_SPECIAL_NAMES)

    def offset(self, stage: int, code: int) -> int:
        if not 0 <= stage < self.n_q:
            raise ValidationError(f"stage {stage} outside [0, {self.n_q})")
        if not 0 <= code < self.codebook_size:
            raise ValidationError(f"code {code} outside [0, {self.codebook_size})")
        return stage * self.codebook_size + code

    def deoffset(self, token_id: int) -> tuple[int, int]:
        if not 0 <= token_id < self.audio_size:
            raise ValidationError(f"id {token_id} is not an audio token")
        return divmod(int(token_id), self.codebook_size)

    def flatten_grid(self, grid: TokenGrid) -> np.ndarray:
        """Frame-major offset ids, length T * n_q."""
        if grid.n_q != self.n_q or grid.codebook_size != self.codebook_size:
            raise ValidationError(
                f"grid geometry ({grid.n_q}, {grid.codebook_size}) does not match "
                f"vocabulary ({self.n_q}, {self.codebook_size})")
        offsets = (np.arange(self.n_q) * self.codebook_size)[None, :]
        return (grid.tokens + offsets).reshape(-1).astype(np.int64)

    def grid_from_ids(self, ids: np.ndarray, *, frame_hop_samples: int,
                      sample_rate_hz: int) -> TokenGrid:
        """Inverse of flatten_grid, validating each slot sits in its stage band."""
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim != 1 or ids.size % self.n_q != 0:
            raise ValidationError(
                f"id sequence of length {ids.size} is not a whole number of "
                f"{self.n_q}-slot frames")
        frames = ids.reshape(-1, self.n_q)
        offsets = np.arange(self.n_q) * self.codebook_size
        codes = frames - offsets[None, :]
        if codes.size and (codes.min() < 0 or codes.max() >= self.codebook_size):
            raise ValidationError("id outside its stage band; not a pure audio sequence")
        return TokenGrid(tokens=codes, n_q=self.n_q, frame_hop_samples=frame_hop_samples,
                         sample_rate_hz=sample_rate_hz, codebook_size=self.codebook_size)

    def special_frame(self, token_id: int) -> np.ndarray:
        """A special id repeated n_q times: one whole frame."""
        if not self.audio_size <= token_id < self.vocab_size:
            raise ValidationError(f"id {token_id} is not a special token")
        return np.full(self.n_q, token_id, dtype=np.int64)


@dataclass(frozen=True)
class LayoutSequence:
    """Flat id sequence with per-position tags, loss mask, and attention mode."""

    ids: np.ndarray
    segment: np.ndarray
    loss_mask: np.ndarray
    mode: str
    prefix_len: int = -1

    def __post_init__(self):
        ids = np.asarray(self.ids, dtype=np.int64)
        seg = np.asarray(self.segment, dtype=np.int64)
        mask = np.asarray(self.loss_mask, dtype=np.int64)
        if not (ids.shape == seg.shape == mask.shape) or ids.ndim != 1:
            raise ValidationError(
                f"ids/segment/loss_mask shapes differ: {ids.shape} {seg.shape} {mask.shape}")
        if ids.size == 0:
            raise ValidationError("empty layout")
        if self.mode not in (CAUSAL, PREFIX):
            raise ValidationError(f"unknown attention mode {self.mode!r}")
        if self.mode == PREFIX and not 0 <= self.prefix_len < ids.size:
            raise ValidationError(
                f"prefix_len {self.prefix_len} outside [0, {ids.size})")
        if mask.size and not np.isin(mask, (0, 1)).all():
            raise ValidationError("loss_mask must be 0/1")
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "segment", seg)
        object.__setattr__(self, "loss_mask", mask)

    def __len__(self) -> int:
        return self.ids.size

    def dump(self) -> str:
        """Debug listing: one `pos id segment loss` line per position."""
        lines = []
        for pos in range(len(self)):
            lines.append(f"{pos} {self.ids[pos]} {Segment(self.segment[pos]).name} "
                         f"{self.loss_mask[pos]}")
        return "\n".join(lines)


def _check_grid(vocab: Vocabulary, grid: TokenGrid, name: str) -> None:
    if grid.n_q != vocab.n_q:
        raise ValidationError(
            f"{name} grid has n_q {grid.n_q}, vocabulary has {vocab.n_q}")
    if grid.codebook_size != vocab.codebook_size:
        raise ValidationError(
            f"{name} grid codebook {grid.codebook_size} != vocabulary "
            f"{vocab.codebook_size}")


def build_separation_layout(vocab: Vocabulary, m: TokenGrid, c: TokenGrid,
                            a: TokenGrid, mode: str = CAUSAL) -> LayoutSequence:
    """mixture, prompt, target in one sequence, delimited and frame-aligned.

    CAUSAL puts loss on every position after the first; PREFIX on the target
    audio and its closing delimiter only, with the prefix boundary at the
    delimiter frame that opens the target.
    """
    for grid, name in ((m, "mixture"), (c, "prompt"), (a, "target")):
        _check_grid(vocab, grid, name)
    if a.num_frames == 0:
        raise ValidationError("separation layout needs a nonempty target")
    n_q = vocab.n_q
    parts = [
        (vocab.special_frame(vocab.a_start), Segment.SPECIAL),
        (vocab.flatten_grid(m), Segment.MIX),
        (vocab.special_frame(vocab.a_end), Segment.SPECIAL),
        (vocab.special_frame(vocab.p_start), Segment.SPECIAL),
        (vocab.flatten_grid(c), Segment.PROMPT),
        (vocab.special_frame(vocab.p_end), Segment.SPECIAL),
        (vocab.special_frame(vocab.a_start), Segment.SPECIAL),
        (vocab.flatten_grid(a), Segment.TARGET),
        (vocab.special_frame(vocab.a_end), Segment.SPECIAL),
    ]
    ids = np.concatenate([p for p, _ in parts])
    seg = np.concatenate([np.full(p.size, s, dtype=np.int64) for p, s in parts])
    n = ids.size
    if mode == CAUSAL:
        mask = np.ones(n, dtype=np.int64)
        mask[0] = 0
        return LayoutSequence(ids=ids, segment=seg, loss_mask=mask, mode=CAUSAL)
    if mode != PREFIX:
        raise ValidationError(f"unknown attention mode {mode!r}")
    # condition frames: [a_start] m [a_end] [p_start] c [p_end] [a_start]
    prefix_len = (5 + m.num_frames + c.num_frames) * n_q - 1
    mask = np.zeros(n, dtype=np.int64)
    mask[prefix_len + 1:] = 1  # target audio plus its closing delimiter
    return LayoutSequence(ids=ids, segment=seg, loss_mask=mask, mode=PREFIX,
                          prefix_len=prefix_len)


def build_separation_prefix(vocab: Vocabulary, m: TokenGrid, c: TokenGrid) -> LayoutSequence:
    """Inference prefix: the separation layout cut right after the delimiter
    frame that opens the target."""
    for grid, name in ((m, "mixture"), (c, "prompt")):
        _check_grid(vocab, grid, name)
    parts = [
        (vocab.special_frame(vocab.a_start), Segment.SPECIAL),
        (vocab.flatten_grid(m), Segment.MIX),
        (vocab.special_frame(vocab.a_end), Segment.SPECIAL),
        (vocab.special_frame(vocab.p_start), Segment.SPECIAL),
        (vocab.flatten_grid(c), Segment.PROMPT),
        (vocab.special_frame(vocab.p_end), Segment.SPECIAL),
        (vocab.special_frame(vocab.a_start), Segment.SPECIAL),
    ]
    ids = np.concatenate([p for p, _ in parts])
    seg = np.concatenate([np.full(p.size, s, dtype=np.int64) for p, s in parts])
    return LayoutSequence(ids=ids, segment=seg, loss_mask=np.zeros(ids.size, dtype=np.int64),
                          mode=CAUSAL)


def build_continuation_layout(vocab: Vocabulary, tokens: TokenGrid, split_frame: int,
                              *, full_loss: bool = False) -> LayoutSequence:
    """Plain audio stream; loss on the continuation after split_frame."""
    _check_grid(vocab, tokens, "continuation")
    t = tokens.num_frames
    if not 0 < split_frame < t:
        raise ValidationError(f"split_frame {split_frame} outside (0, {t})")
    ids = vocab.flatten_grid(tokens)
    n_q = vocab.n_q
    seg = np.empty(ids.size, dtype=np.int64)
    seg[: split_frame * n_q] = Segment.MIX
    seg[split_frame * n_q:] = Segment.TARGET
    mask = np.zeros(ids.size, dtype=np.int64)
    if full_loss:
        mask[1:] = 1
    else:
        mask[split_frame * n_q:] = 1
    return LayoutSequence(ids=ids, segment=seg, loss_mask=mask, mode=CAUSAL)


def build_inpaint_layout(vocab: Vocabulary, tokens: TokenGrid, mask_prob: float = 0.2,
                         seed: int = 0, *, span_mode: bool = False) -> LayoutSequence:
    """Corrupted copy followed by the original; loss on the reconstruction."""
    _check_grid(vocab, tokens, "inpaint")
    if not 0 < mask_prob < 1:
        raise ValidationError(f"mask_prob must be in (0, 1), got {mask_prob}")
    if tokens.num_frames == 0:
        raise ValidationError("inpaint layout needs a nonempty grid")
    flat = vocab.flatten_grid(tokens)
    rng = stream(seed, "inpaint-mask")
    n = flat.size
    if span_mode:
        span = max(1, int(round(mask_prob * n)))
        start = int(rng.integers(0, n - span + 1))
        masked = np.zeros(n, dtype=bool)
        masked[start:start + span] = True
    else:
        masked = rng.random(n) < mask_prob
    source = flat.copy()
    source[masked] = vocab.mask_id
    parts = [
        (vocab.special_frame(vocab.a_start), Segment.SPECIAL),
        (source, Segment.MASKED_SRC),
        (vocab.special_frame(vocab.a_end), Segment.SPECIAL),
        (vocab.special_frame(vocab.a_start), Segment.SPECIAL),
        (flat, Segment.RECON),
        (vocab.special_frame(vocab.a_end), Segment.SPECIAL),
    ]
    ids = np.concatenate([p for p, _ in parts])
    seg = np.concatenate([np.full(p.size, s, dtype=np.int64) for p, s in parts])
    mask = (seg == Segment.RECON).astype(np.int64)
    return LayoutSequence(ids=ids, segment=seg, loss_mask=mask, mode=CAUSAL)


def attention_mask(layout: LayoutSequence) -> np.ndarray:
    """N x N boolean allow matrix for the layout's attention mode."""
    n = len(layout)
    i = np.arange(n)[:, None]
    j = np.arange(n)[None, :]
    causal = j <= i
    if layout.mode == CAUSAL:
        return causal
    p = layout.prefix_len
    condition = (i <= p) & (j <= p)
    return condition | ((i > p) & causal)


def target_grid_of(vocab: Vocabulary, layout: LayoutSequence, *, frame_hop_samples: int,
                   sample_rate_hz: int) -> TokenGrid:
    """The TARGET-tagged ids of a separation layout, as a TokenGrid."""
    ids = layout.ids[layout.segment == Segment.TARGET]
    return vocab.grid_from_ids(ids, frame_hop_samples=frame_hop_samples,
                               sample_rate_hz=sample_rate_hz)
