"""Multi-scale decoder-only transformer over frame-expanded token sequences.

Two stacks share one residual width. The frame-level stack runs over one
summed embedding per frame (frames attend to earlier frames, plus a
bidirectional window over the conditioning region in prefix mode). The
slot-level stack then runs causally inside each frame, conditioned on the
frame vector produced for the *previous* frame, so the token at slot s of
frame t sees exactly: all frames before t, and slots before s within t.

Prediction alignment: the row of ``forward()`` output at index k is the
distribution over ids[k + 1]. Row N - 1 (the last) predicts the first slot
of the frame after the sequence, which is what generation consumes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np

from ..config import canonical_toml, config_hash, parse_toml
from ..errors import ValidationError
from ..numerics import autodiff as T
from ..numerics.store import ParameterStore, load_checkpoint, save_checkpoint
from ..rng import stream
from ..sequence import PREFIX, LayoutSequence, Vocabulary


@dataclass(frozen=True)
class ModelConfig:
    embed_dim: int = 128
    global_layers: int = 2
    local_layers: int = 2
    heads: int = 4
    ff_dim: int = 256
    max_frames: int = 512
    n_q: int = 3
    codebook_size: int = 256
    dropout: float = 0.0

    def __post_init__(self):
        for name in ("embed_dim", "global_layers", "local_layers", "heads",
                     "ff_dim", "max_frames", "n_q", "codebook_size"):
            if getattr(self, name) < 1:
                raise ValidationError(f"model config: {name} must be >= 1")
        if self.embed_dim % self.heads != 0:
            raise ValidationError(
                f"model config: embed_dim {self.embed_dim} not divisible by "
                f"heads {self.heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValidationError("model config: dropout must be in [0, 1)")

    @property
    def vocab_size(self) -> int:
        return self.vocabulary().vocab_size

    def vocabulary(self) -> Vocabulary:
        return Vocabulary(n_q=self.n_q, codebook_size=self.codebook_size)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(
                f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


# Scaled-up shape used only for parameter-count reporting; far too large to
# train on one desktop core.
REFERENCE_CONFIG = ModelConfig(
    embed_dim=1536, global_layers=12, local_layers=4, heads=8, ff_dim=6144,
    max_frames=2048, n_q=3, codebook_size=1024, dropout=0.1)


def _layer_param_shapes(d: int, ff: int) -> dict:
    shapes = {"ln1.g": (d,), "ln1.b": (d,), "ln2.g": (d,), "ln2.b": (d,)}
    for w in ("wq", "wk", "wv", "wo"):
        shapes[f"attn.{w}"] = (d, d)
    # No key bias: it shifts every score in a row by the same amount, which
    # softmax cancels, leaving a parameter with an identically zero gradient.
    for b in ("bq", "bv", "bo"):
        shapes[f"attn.{b}"] = (d,)
    shapes["ff.w1"] = (d, ff)
    shapes["ff.b1"] = (ff,)
    shapes["ff.w2"] = (ff, d)
    shapes["ff.b2"] = (d,)
    return shapes


def param_shapes(config: ModelConfig) -> dict:
    """{name: shape} for every parameter, in creation order."""
    d, v = config.embed_dim, config.vocab_size
    shapes = {
        "emb.tok": (v, d),
        "emb.frame_pos": (config.max_frames, d),
        "emb.slot": (config.n_q, d),
        "global.start": (1, d),
    }
    for stack, n in (("global", config.global_layers),
                     ("local", config.local_layers)):
        for i in range(n):
            for k, s in _layer_param_shapes(d, config.ff_dim).items():
                shapes[f"{stack}.{i}.{k}"] = s
        shapes[f"{stack}.ln_f.g"] = (d,)
        shapes[f"{stack}.ln_f.b"] = (d,)
    shapes["head.w"] = (d, v)
    shapes["head.b"] = (v,)
    return shapes


def init_model_params(config: ModelConfig, seed: int = 0) -> ParameterStore:
    rng = stream(seed, "model-init")
    store = ParameterStore()
    for name, shape in param_shapes(config).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf in ("g",):
            arr = np.ones(shape)
        elif leaf.startswith("b") and "emb" not in name:
            arr = np.zeros(shape)
        elif name.startswith("emb.") or name == "global.start":
            arr = rng.standard_normal(shape) * 0.02
        else:
            fan_in = shape[0]
            arr = rng.standard_normal(shape) / math.sqrt(fan_in)
        store.create(name, arr)
    return store


def frame_attention_mask(layout: LayoutSequence, n_q: int) -> np.ndarray:
    """(F, F) boolean frame-level attention mask for a layout."""
    n = layout.ids.shape[0]
    if n % n_q != 0:
        raise ValidationError(
            f"layout length {n} is not a multiple of n_q {n_q}")
    f = n // n_q
    idx = np.arange(f)
    causal = idx[None, :] <= idx[:, None]
    if layout.mode == PREFIX:
        if (layout.prefix_len + 1) % n_q != 0:
            raise ValidationError(
                f"prefix length {layout.prefix_len} does not end on a frame "
                f"boundary for n_q {n_q}")
        pf = layout.prefix_len // n_q
        bidirectional = (idx[:, None] <= pf) & (idx[None, :] <= pf)
        return bidirectional | causal
    return causal


def _maybe_dropout(x, config: ModelConfig, train: bool, rng):
    if train and config.dropout > 0.0:
        if rng is None:
            raise ValidationError("dropout needs an rng when train=True")
        return T.dropout(x, config.dropout, rng)
    return x


def _affine_ln(x, gamma, beta):
    return T.add(T.mul(T.layer_norm(x), gamma), beta)


def _block(x, mask: np.ndarray, params, prefix: str, config: ModelConfig,
           train: bool, rng):
    # x: (B, S, D) with a shared (S, S) mask across the batch
    b, s, d = x.data.shape
    h = config.heads
    dh = d // h

    ln = _affine_ln(x, params[prefix + "ln1.g"], params[prefix + "ln1.b"])

    def heads_of(w, bias=None):
        t = T.matmul(ln, params[w])
        if bias is not None:
            t = T.add(t, params[bias])
        t = T.reshape(t, (b, s, h, dh))
        return T.reshape(T.transpose(t, (0, 2, 1, 3)), (b * h, s, dh))

    q = heads_of(prefix + "attn.wq", prefix + "attn.bq")
    k = heads_of(prefix + "attn.wk")
    v = heads_of(prefix + "attn.wv", prefix + "attn.bv")
    scores = T.mul_scalar(T.matmul(q, T.transpose(k, (0, 2, 1))),
                          1.0 / math.sqrt(dh))
    ctx = T.matmul(T.masked_softmax(scores, mask), v)
    ctx = T.reshape(T.transpose(T.reshape(ctx, (b, h, s, dh)), (0, 2, 1, 3)),
                    (b, s, d))
    attn_out = T.add(T.matmul(ctx, params[prefix + "attn.wo"]),
                     params[prefix + "attn.bo"])
    x = T.add(x, _maybe_dropout(attn_out, config, train, rng))

    ln2 = _affine_ln(x, params[prefix + "ln2.g"], params[prefix + "ln2.b"])
    hidden = T.gelu(T.add(T.matmul(ln2, params[prefix + "ff.w1"]),
                          params[prefix + "ff.b1"]))
    ff_out = T.add(T.matmul(hidden, params[prefix + "ff.w2"]),
                   params[prefix + "ff.b2"])
    return T.add(x, _maybe_dropout(ff_out, config, train, rng))


def forward(layout: LayoutSequence, params, config: ModelConfig, *,
            train: bool = False, rng=None) -> T.Tensor:
    """Next-token logits, shape (N, vocab_size); row k predicts ids[k + 1]."""
    n_q, d = config.n_q, config.embed_dim
    ids = layout.ids
    n = ids.shape[0]
    if n % n_q != 0:
        raise ValidationError(
            f"layout length {n} is not a multiple of n_q {n_q}")
    f = n // n_q
    if f > config.max_frames:
        raise ValidationError(
            f"layout spans {f} frames but max_frames is {config.max_frames}")

    emb_all = T.embedding_lookup(params["emb.tok"], ids)
    frame_tok = T.sum_(T.reshape(emb_all, (f, n_q, d)), axis=1)
    pos = T.embedding_lookup(params["emb.frame_pos"], np.arange(f))
    x = T.reshape(T.add(frame_tok, pos), (1, f, d))

    fmask = frame_attention_mask(layout, n_q)
    for i in range(config.global_layers):
        x = _block(x, fmask, params, f"global.{i}.", config, train, rng)
    x = _affine_ln(x, params["global.ln_f.g"], params["global.ln_f.b"])
    frame_vec = T.reshape(x, (f, d))

    # Frame t's slots condition on frame_vec[t - 1]; frame 0 on a learned
    # start vector. One extra conditioning row (frame_vec[f - 1]) drives the
    # prediction of the frame after the sequence. Slot 0 gets no
    # previous-token term: cross-frame context reaches the slot stack only
    # through the frame vector, which is what lets generation predict a
    # frame from the cache alone.
    cond = T.concat([params["global.start"], frame_vec], axis=0)
    dt = T.active_dtype()
    emb_frames = T.reshape(emb_all, (f, n_q, d))
    zero_slot = T.constant(np.zeros((f, 1, d), dtype=dt))
    if n_q > 1:
        prev = T.concat([zero_slot, T.narrow(emb_frames, 1, 0, n_q - 1)], axis=1)
    else:
        prev = zero_slot
    prev = T.concat([prev, T.constant(np.zeros((1, n_q, d), dtype=dt))], axis=0)
    slot = T.embedding_lookup(params["emb.slot"], np.arange(n_q))
    y = T.add(T.add(T.reshape(cond, (f + 1, 1, d)), T.reshape(slot, (1, n_q, d))),
              prev)

    lmask = np.tril(np.ones((n_q, n_q), dtype=bool))
    for i in range(config.local_layers):
        y = _block(y, lmask, params, f"local.{i}.", config, train, rng)
    y = _affine_ln(y, params["local.ln_f.g"], params["local.ln_f.b"])

    flat = T.reshape(y, ((f + 1) * n_q, d))
    logits_all = T.add(T.matmul(flat, params["head.w"]), params["head.b"])
    return T.narrow(logits_all, 0, 1, n)


def sequence_loss(layout: LayoutSequence, params, config: ModelConfig, *,
                  train: bool = False, rng=None) -> T.Tensor:
    """Mean cross-entropy over the layout's supervised positions (nats)."""
    mask = layout.loss_mask[1:]
    if int(mask.sum()) == 0:
        raise ValidationError("layout has no supervised positions")
    logits = forward(layout, params, config, train=train, rng=rng)
    n = layout.ids.shape[0]
    return T.cross_entropy(T.narrow(logits, 0, 0, n - 1), layout.ids[1:], mask)


def _config_sections(config: ModelConfig) -> dict:
    return {"model": config.to_dict()}


def save_model(path, store: ParameterStore, config: ModelConfig,
               step: int = 0) -> None:
    sections = _config_sections(config)
    save_checkpoint(path, store, step, config_hash=config_hash(sections),
                    config_text=canonical_toml(sections))


def load_model(path) -> tuple[ParameterStore, ModelConfig, int]:
    ckpt = load_checkpoint(path)
    sections = parse_toml(ckpt.config_text)
    if "model" not in sections:
        raise ValidationError(f"{path}: checkpoint has no [model] section")
    config = ModelConfig.from_dict(sections["model"])
    expected = param_shapes(config)
    if set(ckpt.values) != set(expected):
        missing = sorted(set(expected) - set(ckpt.values))
        extra = sorted(set(ckpt.values) - set(expected))
        raise ValidationError(
            f"{path}: parameter names do not match config "
            f"(missing {missing[:3]}, extra {extra[:3]})")
    store = ParameterStore()
    for name, shape in expected.items():
        arr = ckpt.values[name]
        if arr.shape != shape:
            raise ValidationError(
                f"{path}: {name} has shape {arr.shape}, expected {shape}")
        store.create(name, arr)
    return store, config, ckpt.step
