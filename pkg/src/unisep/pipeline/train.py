"""Language-model training loops: audio-only pre-training and separation.

Batches are assembled by token budget, losses are token-weighted so the
batch mean equals the mean over all supervised positions, and every random
draw is derived from (seed, step), which makes resuming from a checkpoint
reproduce the original trajectory bit for bit.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from ..errors import ValidationError
from ..model.core import ModelConfig, save_model, sequence_loss
from ..numerics import autodiff as T
from ..numerics.optim import LrSchedule, adamw_step, clip_gradients
from ..numerics.store import ParameterStore, load_checkpoint, save_checkpoint
from ..rng import stream
from ..sequence import (
    CAUSAL,
    PREFIX,
    build_continuation_layout,
    build_inpaint_layout,
    build_separation_layout,
)

log = logging.getLogger("unisep.train")

_SEED_SPAN = 2 ** 31


@dataclass(frozen=True)
class TrainConfig:
    lm_lr: float = 5e-4
    warmup_steps: int = 100
    weight_decay: float = 0.01
    clip_norm: float = 1.0
    token_budget: int = 4800
    sep_epochs: int = 2
    sep_max_steps: int = 0  # 0 = run the configured epochs to the end
    pretrain_steps: int = 400
    pretrain_items: int = 64
    pretrain_duration_s: float = 2.0
    mask_prob: float = 0.2
    eval_every: int = 100
    checkpoint_every: int = 0  # 0 = final checkpoint only
    mode: str = CAUSAL
    codec_steps: int = 8000
    codec_batch_frames: int = 512
    codec_lr: float = 3e-3
    codec_items_per_family: int = 16
    codec_corpus_duration_s: float = 2.0
    codec_mixture_items: int = 12
    seed: int = 0

    def __post_init__(self):
        if self.mode not in (CAUSAL, PREFIX):
            raise ValidationError(f"train config: unknown mode {self.mode!r}")
        for name in ("lm_lr", "clip_norm", "pretrain_duration_s", "codec_lr",
                     "codec_corpus_duration_s"):
            if getattr(self, name) <= 0:
                raise ValidationError(f"train config: {name} must be positive")
        for name in ("warmup_steps", "token_budget", "sep_epochs",
                     "pretrain_steps", "pretrain_items", "codec_steps",
                     "codec_batch_frames", "codec_items_per_family"):
            if getattr(self, name) < 1:
                raise ValidationError(f"train config: {name} must be >= 1")
        for name in ("weight_decay", "sep_max_steps", "eval_every",
                     "checkpoint_every", "codec_mixture_items", "seed"):
            if getattr(self, name) < 0:
                raise ValidationError(f"train config: {name} must be >= 0")
        if not 0.0 <= self.mask_prob < 1.0:
            raise ValidationError("train config: mask_prob must be in [0, 1)")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainLog:
    steps: int = 0
    loss_history: list = field(default_factory=list)
    eval_history: list = field(default_factory=list)  # (step, loss) pairs
    task_history: dict = field(default_factory=dict)  # task -> [(step, loss)]
    trained_items: int = 0
    skipped_items: int = 0


def check_codec_model_match(codec, model_config: ModelConfig) -> None:
    cc = codec.config
    if cc.n_q != model_config.n_q or cc.codebook_size != model_config.codebook_size:
        raise ValidationError(
            f"codec emits {cc.n_q}x{cc.codebook_size} tokens but the model "
            f"vocabulary expects {model_config.n_q}x{model_config.codebook_size}")


def batch_loss(layouts: list, store, model_config: ModelConfig, *,
               train: bool = False, rng=None, with_grads: bool = False):
    """Token-weighted mean loss over layouts; optionally accumulates grads.

    Weighting by supervised-token count makes the result equal to one
    cross-entropy averaged over every supervised position in the batch, so
    the value does not depend on how those positions are grouped into
    layouts of different lengths.
    """
    if not layouts:
        raise ValidationError("empty batch")
    weights = [int(lay.loss_mask[1:].sum()) for lay in layouts]
    total = sum(weights)
    acc = 0.0
    per_layout = []
    for lay, w in zip(layouts, weights):
        loss = sequence_loss(lay, store, model_config, train=train, rng=rng)
        share = w / total
        if with_grads:
            T.backward(T.mul_scalar(loss, share))
        value = loss.item()
        per_layout.append(value)
        acc += value * share
    return acc, per_layout


def pack_batches(order, token_counts: list, budget: int) -> list:
    """Greedy packing of layout indices into batches of at most budget tokens."""
    longest = max(token_counts) if token_counts else 0
    if longest > budget:
        raise ValidationError(
            f"token budget {budget} is smaller than the longest layout "
            f"({longest} tokens)")
    batches, cur, used = [], [], 0
    for idx in order:
        t = token_counts[idx]
        if cur and used + t > budget:
            batches.append(cur)
            cur, used = [], 0
        cur.append(int(idx))
        used += t
    if cur:
        batches.append(cur)
    return batches


def save_trainer_state(path, store: ParameterStore, step: int) -> None:
    """Optimizer moments in the checkpoint container, names prefixed m./v."""
    shadow = ParameterStore()
    for name in store.names():
        e = store.entry(name)
        shadow.create("m." + name, e.m)
        shadow.create("v." + name, e.v)
    save_checkpoint(path, shadow, step)


def load_trainer_state(path, store: ParameterStore) -> int:
    ckpt = load_checkpoint(path)
    for name in store.names():
        e = store.entry(name)
        for prefix, slot in (("m.", e.m), ("v.", e.v)):
            key = prefix + name
            if key not in ckpt.values:
                raise ValidationError(f"{path}: trainer state missing {key}")
            if ckpt.values[key].shape != slot.shape:
                raise ValidationError(f"{path}: {key} has the wrong shape")
            slot[...] = ckpt.values[key]
        e.step = ckpt.step
    return ckpt.step


def build_separation_layouts(codec, model_config: ModelConfig, triples: list,
                             *, mode: str = CAUSAL) -> tuple[list, int]:
    """(layouts, skipped): triples too long for the model context are dropped."""
    check_codec_model_match(codec, model_config)
    vocab = model_config.vocabulary()
    layouts, skipped = [], 0
    for i, t in enumerate(triples):
        m = codec.tokenize(t.mixture)
        c = codec.tokenize(t.prompt)
        a = codec.tokenize(t.target)
        frames = 5 + m.num_frames + c.num_frames + a.num_frames
        if frames > model_config.max_frames:
            log.warning("triple %d spans %d frames > max_frames %d; skipped",
                        i, frames, model_config.max_frames)
            skipped += 1
            continue
        layouts.append(build_separation_layout(vocab, m, c, a, mode=mode))
    return layouts, skipped


def _maybe_checkpoint(out_dir, store, model_config, step, config: TrainConfig,
                      final: bool) -> None:
    if out_dir is None:
        return
    due = final or (config.checkpoint_every > 0
                    and step % config.checkpoint_every == 0)
    if not due:
        return
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_model(out / "model.uspt", store, model_config, step=step)
    save_trainer_state(out / "trainer.uspt", store, step)


def _optimizer_step(store, schedule: LrSchedule, step: int,
                    config: TrainConfig) -> None:
    clip_gradients(store, config.clip_norm)
    adamw_step(store, schedule.lr_at(step), weight_decay=config.weight_decay)


def _eval_due(step: int, total: int, config: TrainConfig) -> bool:
    return step == total or (config.eval_every > 0
                             and step % config.eval_every == 0)


def train_separation(store: ParameterStore, model_config: ModelConfig, codec,
                     layouts: list, config: TrainConfig, *, seed: int = 0,
                     eval_layouts: list | None = None, out_dir=None,
                     start_step: int = 0, skipped_items: int = 0) -> TrainLog:
    """Separation training over prebuilt layouts (see build_separation_layouts).

    Initialization policy is the caller's: pass a fresh store for training
    from scratch or a loaded pre-trained one. With start_step > 0 the loop
    fast-forwards the deterministic batch order and continues, which
    reproduces an uninterrupted run exactly (optimizer moments must have
    been restored via load_trainer_state).
    """
    if not layouts:
        raise ValidationError("no layouts to train on")
    check_codec_model_match(codec, model_config)
    token_counts = [lay.ids.shape[0] for lay in layouts]
    schedule = LrSchedule(base_lr=config.lm_lr, warmup_steps=config.warmup_steps,
                          model_dim=model_config.embed_dim)

    epoch_batches = []
    total_steps = 0
    epoch = 0
    # Lay out the whole deterministic step plan first so epochs, step caps,
    # and resume all agree on what step k contains.
    while True:
        order = stream(seed, "sep-order", epoch).permutation(len(layouts))
        batches = pack_batches(order, token_counts, config.token_budget)
        epoch_batches.append(batches)
        total_steps += len(batches)
        epoch += 1
        if config.sep_max_steps > 0:
            if total_steps >= config.sep_max_steps:
                total_steps = config.sep_max_steps
                break
        elif epoch >= config.sep_epochs:
            break

    train_log = TrainLog(trained_items=len(layouts), skipped_items=skipped_items)
    step = 0
    use_dropout = model_config.dropout > 0.0
    for batches in epoch_batches:
        for batch in batches:
            step += 1
            if step > total_steps:
                break
            if step <= start_step:
                continue
            store.zero_grads()
            rng = stream(seed, "sep-dropout", step) if use_dropout else None
            mean_loss, _ = batch_loss([layouts[i] for i in batch], store,
                                      model_config, train=use_dropout, rng=rng,
                                      with_grads=True)
            _optimizer_step(store, schedule, step, config)
            train_log.loss_history.append(mean_loss)
            if eval_layouts and _eval_due(step, total_steps, config):
                eval_loss, _ = batch_loss(eval_layouts, store, model_config)
                train_log.eval_history.append((step, eval_loss))
            _maybe_checkpoint(out_dir, store, model_config, step, config,
                              final=step == total_steps)
    train_log.steps = total_steps
    return train_log


def pretrain(store: ParameterStore, model_config: ModelConfig, codec,
             waves: list, config: TrainConfig, *, seed: int = 0,
             steps: int | None = None, out_dir=None,
             continuation_fraction: float = 0.5) -> TrainLog:
    """Audio-only pre-training: continuation and inpaint layouts mixed per
    batch element, per-task losses logged separately."""
    if not waves:
        raise ValidationError("no pre-training audio")
    check_codec_model_match(codec, model_config)
    if not 0.0 <= continuation_fraction <= 1.0:
        raise ValidationError("continuation_fraction must be in [0, 1]")
    vocab = model_config.vocabulary()
    grids = [codec.tokenize(w) for w in waves]
    for g in grids:
        if g.num_frames < 2:
            raise ValidationError("pre-training items must span >= 2 frames")
        if 2 * g.num_frames + 4 > model_config.max_frames:
            raise ValidationError(
                "pre-training item too long for the model context")

    total = config.pretrain_steps if steps is None else steps
    if total < 1:
        raise ValidationError("pretrain needs >= 1 step")
    schedule = LrSchedule(base_lr=config.lm_lr, warmup_steps=config.warmup_steps,
                          model_dim=model_config.embed_dim)
    train_log = TrainLog(trained_items=len(grids),
                         task_history={"continuation": [], "inpaint": []})
    use_dropout = model_config.dropout > 0.0

    for step in range(1, total + 1):
        rng = stream(seed, "pretrain-batch", step)
        layouts, tasks, used = [], [], 0
        while True:
            grid = grids[int(rng.integers(len(grids)))]
            if rng.random() < continuation_fraction:
                lo = max(1, int(np.ceil(0.25 * grid.num_frames)))
                hi = min(grid.num_frames - 1, int(0.75 * grid.num_frames))
                split = int(rng.integers(lo, max(lo, hi) + 1))
                lay = build_continuation_layout(vocab, grid, split)
                task = "continuation"
            else:
                lay = build_inpaint_layout(vocab, grid,
                                           mask_prob=config.mask_prob,
                                           seed=int(rng.integers(_SEED_SPAN)))
                task = "inpaint"
            n = lay.ids.shape[0]
            if layouts and used + n > config.token_budget:
                break
            layouts.append(lay)
            tasks.append(task)
            used += n
            if used >= config.token_budget:
                break

        store.zero_grads()
        drop_rng = stream(seed, "pretrain-dropout", step) if use_dropout else None
        mean_loss, per_layout = batch_loss(layouts, store, model_config,
                                           train=use_dropout, rng=drop_rng,
                                           with_grads=True)
        _optimizer_step(store, schedule, step, config)
        train_log.loss_history.append(mean_loss)
        for task in ("continuation", "inpaint"):
            vals = [v for v, t in zip(per_layout, tasks) if t == task]
            if vals:
                train_log.task_history[task].append((step, float(np.mean(vals))))
        _maybe_checkpoint(out_dir, store, model_config, step, config,
                          final=step == total)
    train_log.steps = total
    return train_log
