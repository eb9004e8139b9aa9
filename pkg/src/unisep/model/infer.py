"""Pure-numpy autoregressive decoding with a per-layer key/value cache.

The training forward in `core` rebuilds the whole sequence every call; this
module mirrors it without the autodiff graph so generation is O(frames^2)
in attention only. Frame vectors are cached as keys/values per frame-level
layer; the slot-level stack is cheap (n_q rows) and recomputed per slot.

Decoding is constrained: slot s may only emit ids from stage band s, and
slot 0 may additionally emit the audio-end marker, which terminates
generation. The frame-position table bounds total length; hitting it
without the marker sets `truncated` on the result.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .. import kernels
from ..codec.core import TokenGrid
from ..errors import ValidationError
from ..rng import stream
from ..sequence import CAUSAL, PREFIX, LayoutSequence, Vocabulary
from .core import ModelConfig

_LN_EPS = 1e-5


@dataclass(frozen=True)
class Sampling:
    """Decoding rule: greedy argmax, or temperature + top-k sampling."""

    kind: str = "greedy"
    top_k: int = 30
    temperature: float = 0.8

    def __post_init__(self):
        if self.kind not in ("greedy", "top_k"):
            raise ValidationError(f"unknown sampling kind {self.kind!r}")
        if self.kind == "top_k":
            if self.top_k < 1:
                raise ValidationError("top_k must be >= 1")
            if self.temperature <= 0.0:
                raise ValidationError("temperature must be > 0")


GREEDY = Sampling()


@dataclass(frozen=True)
class GenerateResult:
    grid: TokenGrid
    truncated: bool

    @property
    def num_frames(self) -> int:
        return self.grid.num_frames


def _param_arrays(params) -> dict:
    if hasattr(params, "state_dict"):
        return params.state_dict()
    return {k: np.asarray(v.data if hasattr(v, "data") else v)
            for k, v in params.items()}


def _ln(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray) -> np.ndarray:
    flat = np.ascontiguousarray(x.reshape(-1, x.shape[-1]))
    y, _, _ = kernels.layer_norm(flat, _LN_EPS)
    return y.reshape(x.shape) * gamma + beta


def _gelu(x: np.ndarray) -> np.ndarray:
    c = math.sqrt(2.0 / math.pi)
    return 0.5 * x * (1.0 + np.tanh(c * (x + 0.044715 * x ** 3)))


def _ff(x: np.ndarray, a: dict, prefix: str) -> np.ndarray:
    ln = _ln(x, a[prefix + "ln2.g"], a[prefix + "ln2.b"])
    h = _gelu(ln @ a[prefix + "ff.w1"] + a[prefix + "ff.b1"])
    return x + (h @ a[prefix + "ff.w2"] + a[prefix + "ff.b2"])


def _heads(x: np.ndarray, h: int) -> np.ndarray:
    # (S, D) -> (H, S, dh)
    s, d = x.shape
    return x.reshape(s, h, d // h).transpose(1, 0, 2)


def _merge(x: np.ndarray) -> np.ndarray:
    # (H, S, dh) -> (S, D)
    h, s, dh = x.shape
    return x.transpose(1, 0, 2).reshape(s, h * dh)


class _FrameState:
    """Rolling frame-level stack state: per-layer K/V plus the frame count."""

    def __init__(self, config: ModelConfig):
        self.k: list[np.ndarray] = [None] * config.global_layers
        self.v: list[np.ndarray] = [None] * config.global_layers
        self.frames = 0


def _run_global_prefix(x: np.ndarray, mask: np.ndarray, arrs: dict,
                       config: ModelConfig, state: _FrameState) -> np.ndarray:
    h = config.heads
    dh = config.embed_dim // h
    for i in range(config.global_layers):
        p = f"global.{i}."
        ln = _ln(x, arrs[p + "ln1.g"], arrs[p + "ln1.b"])
        q = _heads(ln @ arrs[p + "attn.wq"] + arrs[p + "attn.bq"], h)
        k = _heads(ln @ arrs[p + "attn.wk"], h)
        v = _heads(ln @ arrs[p + "attn.wv"] + arrs[p + "attn.bv"], h)
        scores = (q @ k.transpose(0, 2, 1)) / math.sqrt(dh)
        probs = kernels.masked_softmax(scores, mask)
        x = x + (_merge(probs @ v) @ arrs[p + "attn.wo"] + arrs[p + "attn.bo"])
        x = _ff(x, arrs, p)
        state.k[i], state.v[i] = k, v
    state.frames = x.shape[0]
    return _ln(x, arrs["global.ln_f.g"], arrs["global.ln_f.b"])


def _extend_global(frame_in: np.ndarray, arrs: dict, config: ModelConfig,
                   state: _FrameState) -> np.ndarray:
    """Push one frame embedding through the frame stack; returns its vector."""
    h = config.heads
    dh = config.embed_dim // h
    x = frame_in[None, :]
    full = np.ones((1, state.frames + 1), dtype=bool)
    for i in range(config.global_layers):
        p = f"global.{i}."
        ln = _ln(x, arrs[p + "ln1.g"], arrs[p + "ln1.b"])
        q = _heads(ln @ arrs[p + "attn.wq"] + arrs[p + "attn.bq"], h)
        k_new = _heads(ln @ arrs[p + "attn.wk"], h)
        v_new = _heads(ln @ arrs[p + "attn.wv"] + arrs[p + "attn.bv"], h)
        state.k[i] = np.concatenate([state.k[i], k_new], axis=1)
        state.v[i] = np.concatenate([state.v[i], v_new], axis=1)
        scores = (q @ state.k[i].transpose(0, 2, 1)) / math.sqrt(dh)
        probs = kernels.masked_softmax(scores, full)
        ctx = _merge(probs @ state.v[i])
        x = x + (ctx @ arrs[p + "attn.wo"] + arrs[p + "attn.bo"])
        x = _ff(x, arrs, p)
    state.frames += 1
    return _ln(x, arrs["global.ln_f.g"], arrs["global.ln_f.b"])[0]


def _local_logits(cond: np.ndarray, slot_ids: list, arrs: dict,
                  config: ModelConfig) -> np.ndarray:
    """Logits for slot len(slot_ids) of a frame conditioned on `cond`."""
    s = len(slot_ids)
    d = config.embed_dim
    h = config.heads
    dh = d // h
    x = np.empty((s + 1, d), dtype=cond.dtype)
    for j in range(s + 1):
        x[j] = cond + arrs["emb.slot"][j]
        if j > 0:
            x[j] += arrs["emb.tok"][slot_ids[j - 1]]
    mask = np.tril(np.ones((s + 1, s + 1), dtype=bool))
    for i in range(config.local_layers):
        p = f"local.{i}."
        ln = _ln(x, arrs[p + "ln1.g"], arrs[p + "ln1.b"])
        q = _heads(ln @ arrs[p + "attn.wq"] + arrs[p + "attn.bq"], h)
        k = _heads(ln @ arrs[p + "attn.wk"], h)
        v = _heads(ln @ arrs[p + "attn.wv"] + arrs[p + "attn.bv"], h)
        scores = (q @ k.transpose(0, 2, 1)) / math.sqrt(dh)
        probs = kernels.masked_softmax(scores, mask)
        x = x + (_merge(probs @ v) @ arrs[p + "attn.wo"] + arrs[p + "attn.bo"])
        x = _ff(x, arrs, p)
    x = _ln(x, arrs["local.ln_f.g"], arrs["local.ln_f.b"])
    return x[-1] @ arrs["head.w"] + arrs["head.b"]


def _pick(logits: np.ndarray, slot: int, vocab: Vocabulary, allow_stop: bool,
          sampling: Sampling, rng) -> int:
    lo = slot * vocab.codebook_size
    hi = lo + vocab.codebook_size
    allowed = np.zeros(logits.shape[0], dtype=bool)
    allowed[lo:hi] = True
    if allow_stop and slot == 0:
        allowed[vocab.a_end] = True
    masked = np.where(allowed, logits.astype(np.float64), -np.inf)
    if sampling.kind == "greedy":
        return int(np.argmax(masked))
    kth = min(sampling.top_k, int(allowed.sum()))
    keep = np.argpartition(masked, -kth)[-kth:]
    z = masked[keep] / sampling.temperature
    z -= z.max()
    p = np.exp(z)
    p /= p.sum()
    return int(keep[rng.choice(kth, p=p)])


def _frame_embedding(ids_frame: np.ndarray, position: int,
                     arrs: dict) -> np.ndarray:
    return arrs["emb.tok"][ids_frame].sum(axis=0) + arrs["emb.frame_pos"][position]


def _prefix_frame_mask(num_frames: int, mode: str) -> np.ndarray:
    if mode == PREFIX:
        return np.ones((num_frames, num_frames), dtype=bool)
    idx = np.arange(num_frames)
    return idx[None, :] <= idx[:, None]


def generate(prefix_layout: LayoutSequence, params, config: ModelConfig, *,
             frame_hop_samples: int, sample_rate_hz: int,
             sampling: Sampling = GREEDY, max_new_frames: int | None = None,
             seed: int = 0, attention_mode: str | None = None) -> GenerateResult:
    """Sample audio frames continuing `prefix_layout` until the end marker.

    `attention_mode` selects how the prefix region attends to itself (match
    it to how the model was trained); it defaults to the layout's own mode.
    The returned grid holds only the newly generated audio frames.
    """
    vocab = config.vocabulary()
    n_q = config.n_q
    ids = prefix_layout.ids
    if ids.shape[0] % n_q != 0:
        raise ValidationError(
            f"prefix length {ids.shape[0]} is not a multiple of n_q {n_q}")
    f0 = ids.shape[0] // n_q
    if f0 < 1:
        raise ValidationError("prefix must contain at least one frame")
    if f0 > config.max_frames:
        raise ValidationError(
            f"prefix spans {f0} frames but max_frames is {config.max_frames}")
    mode = attention_mode if attention_mode is not None else prefix_layout.mode
    if mode not in (CAUSAL, PREFIX):
        raise ValidationError(f"unknown attention mode {mode!r}")

    arrs = _param_arrays(params)
    frames_budget = config.max_frames - f0
    if max_new_frames is not None:
        frames_budget = min(frames_budget, max_new_frames)
    rng = stream(seed, "generate")

    frame_ids = ids.reshape(f0, n_q)
    x = np.stack([_frame_embedding(frame_ids[t], t, arrs) for t in range(f0)])
    state = _FrameState(config)
    frame_vecs = _run_global_prefix(x, _prefix_frame_mask(f0, mode), arrs,
                                    config, state)
    cond = frame_vecs[-1]

    out_frames: list[list[int]] = []
    truncated = True
    for _ in range(frames_budget):
        slots: list[int] = []
        stopped = False
        for s in range(n_q):
            logits = _local_logits(cond, slots, arrs, config)
            token = _pick(logits, s, vocab, allow_stop=True, sampling=sampling,
                          rng=rng)
            if token == vocab.a_end:
                stopped = True
                break
            slots.append(token)
        if stopped:
            truncated = False
            break
        out_frames.append(slots)
        new_frame = np.asarray(slots, dtype=np.int64)
        position = f0 + len(out_frames) - 1
        cond = _extend_global(_frame_embedding(new_frame, position, arrs),
                              arrs, config, state)

    flat = np.asarray([t for fr in out_frames for t in fr], dtype=np.int64)
    grid = vocab.grid_from_ids(flat, frame_hop_samples=frame_hop_samples,
                               sample_rate_hz=sample_rate_hz)
    return GenerateResult(grid=grid, truncated=truncated)


def incremental_logits(layout: LayoutSequence, params,
                       config: ModelConfig) -> np.ndarray:
    """Teacher-forced replay through the cached decode path.

    Returns an (N, vocab_size) array aligned with `core.forward`: row k is
    the prediction for ids[k + 1]. Exists so tests can pin the cached
    incremental path against the batch forward.
    """
    vocab = config.vocabulary()
    n_q = config.n_q
    ids = layout.ids
    n = ids.shape[0]
    if n % n_q != 0:
        raise ValidationError(
            f"layout length {n} is not a multiple of n_q {n_q}")
    f = n // n_q
    arrs = _param_arrays(params)
    frame_ids = ids.reshape(f, n_q)

    # Seed the cache with the bidirectional (or first) region in one batch,
    # then push the remaining frames through one at a time, so this replay
    # covers the same cache-extension path generation uses.
    pf = layout.prefix_len // n_q if layout.mode == PREFIX else 0
    x = np.stack([_frame_embedding(frame_ids[t], t, arrs) for t in range(pf + 1)])
    state = _FrameState(config)
    seeded = _run_global_prefix(x, _prefix_frame_mask(pf + 1, layout.mode),
                                arrs, config, state)
    frame_vecs = list(seeded)
    for t in range(pf + 1, f):
        frame_vecs.append(
            _extend_global(_frame_embedding(frame_ids[t], t, arrs),
                           arrs, config, state))

    rows = []
    for t in range(f + 1):
        cond = arrs["global.start"][0] if t == 0 else frame_vecs[t - 1]
        observed = [] if t == f else list(frame_ids[t])
        for s in range(n_q):
            if t == f and s > 0:
                break
            prior = observed[:s]
            rows.append(_local_logits(cond, prior, arrs, config))
    logits_all = np.stack(rows)  # (f * n_q + 1, vocab) = rows 0..N of core
    return logits_all[1:]
