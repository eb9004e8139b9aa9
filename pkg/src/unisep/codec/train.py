"""Codec training: log-magnitude column regression with straight-through
gradients across the quantizer, EMA k-means codebook updates, dead-code
reinit.

The encoder and decoder both live in the log-magnitude domain, so training
is a plain regression from each column through the quantized latent back to
the same column. Phase is reconstructed only at decode time and needs no
gradient.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import kernels
from ..errors import NumericalError, ValidationError
from ..numerics import LrSchedule, adamw_step, clip_gradients
from ..numerics import autodiff as T
from ..rng import stream
from ..signal import Waveform
from .core import Codebooks, Codec, CodecConfig


@dataclass
class CodecTrainLog:
    steps: int
    final_loss: float
    loss_history: list


def _smooth_l1(diff: T.Tensor) -> T.Tensor:
    # |x| via sqrt(x^2 + eps): differentiable at 0, negligible bias elsewhere
    return T.mean(T.sqrt(T.add(T.mul(diff, diff), T.constant(np.float32(1e-10)))))


def _init_codebooks(codec: Codec, h: np.ndarray, rng: np.random.Generator) -> None:
    """Seed each stage from the residuals the previous stages leave behind."""
    c = codec.config
    cb = codec.codebooks
    residual = h.astype(np.float32).copy()
    for q in range(c.n_q):
        picks = rng.integers(residual.shape[0], size=c.codebook_size)
        jitter = rng.standard_normal((c.codebook_size, c.latent_dim)).astype(np.float32)
        cb.centroids[q] = residual[picks] + 1e-4 * jitter
        cb.ema_counts[q] = 1.0
        cb.ema_sums[q] = cb.centroids[q].astype(np.float64)
        idx = kernels.nearest_code(residual.astype(np.float64), cb.centroids[q].astype(np.float64))
        residual -= cb.centroids[q][idx]


def _ema_update(cb: Codebooks, stage: int, residual: np.ndarray, codes: np.ndarray,
                decay: float, dead_after: int, rng: np.random.Generator) -> None:
    k, latent = cb.centroids.shape[1:]
    counts = np.bincount(codes, minlength=k).astype(np.float64)
    sums = np.zeros((k, latent), dtype=np.float64)
    kernels.scatter_add_rows(sums, codes.astype(np.int64), residual.astype(np.float64))
    cb.ema_counts[stage] = decay * cb.ema_counts[stage] + (1.0 - decay) * counts
    cb.ema_sums[stage] = decay * cb.ema_sums[stage] + (1.0 - decay) * sums
    used = counts > 0
    cb.unused_batches[stage][used] = 0
    cb.unused_batches[stage][~used] += 1
    denom = np.maximum(cb.ema_counts[stage], 1e-7)[:, None]
    cb.centroids[stage] = (cb.ema_sums[stage] / denom).astype(np.float32)
    dead = cb.unused_batches[stage] >= dead_after
    if dead.any():
        picks = rng.integers(residual.shape[0], size=int(dead.sum()))
        seeds = residual[picks].astype(np.float32)
        cb.centroids[stage][dead] = seeds
        cb.ema_counts[stage][dead] = 1.0
        cb.ema_sums[stage][dead] = seeds.astype(np.float64)
        cb.unused_batches[stage][dead] = 0


def _quantize_with_stages(codec: Codec, h: np.ndarray):
    residual = h.copy()
    hhat = np.zeros_like(residual)
    stage_residuals, stage_codes = [], []
    for q in range(codec.config.n_q):
        idx = kernels.nearest_code(residual.astype(np.float64),
                                   codec.codebooks.centroids[q].astype(np.float64))
        stage_residuals.append(residual.copy())
        stage_codes.append(idx)
        chosen = codec.codebooks.centroids[q][idx]
        hhat += chosen
        residual -= chosen
    return hhat, stage_residuals, stage_codes


def train_codec(dataset: list[Waveform], config: CodecConfig, *, steps: int = 2000,
                batch_frames: int = 512, base_lr: float = 3e-3, warmup_steps: int = 100,
                weight_decay: float = 1e-4, clip_norm: float = 5.0, seed: int = 0,
                log_every: int = 0) -> tuple[Codec, CodecTrainLog]:
    """Train encoder/decoder/codebooks on a corpus of waveforms.

    Deterministic in (dataset order, config, keyword arguments, seed).
    """
    if not dataset:
        raise ValidationError("codec training needs a nonempty dataset")
    if steps < 1:
        raise ValidationError(f"steps must be >= 1, got {steps}")
    codec = Codec(config, seed=seed)

    bank = np.concatenate([codec.log_mag_frames(w) for w in dataset], axis=0)
    batch_rng = stream(seed, "codec-batches")
    reinit_rng = stream(seed, "codec-reinit")

    warm = bank[batch_rng.integers(bank.shape[0], size=min(4096, bank.shape[0] * 4))]
    h0 = codec.encode_frames_t(T.constant(warm)).data
    _init_codebooks(codec, h0, reinit_rng)

    schedule = LrSchedule(base_lr=base_lr, warmup_steps=warmup_steps)
    history = []
    loss_val = float("nan")
    for step in range(1, steps + 1):
        cols_np = bank[batch_rng.integers(bank.shape[0], size=batch_frames)]
        cols = T.constant(cols_np)
        h = codec.encode_frames_t(cols)
        hhat, stage_residuals, stage_codes = _quantize_with_stages(codec, h.data)

        # straight-through: decoder sees hhat, encoder receives its gradient
        hq = T.add(h, T.constant(hhat - h.data))
        pred = codec.decode_frames_t(hq)

        rec = _smooth_l1(T.add(pred, T.mul_scalar(cols, -1.0)))
        commit_diff = T.add(h, T.constant(-hhat))
        commit = T.mean(T.mul(commit_diff, commit_diff))
        loss = T.add(rec, T.mul_scalar(commit, config.commitment_weight))

        loss_val = loss.item()
        if not np.isfinite(loss_val):
            raise NumericalError(
                f"codec training diverged at step {step}: loss={loss_val} "
                f"(rec={rec.item():.4g} commit={commit.item():.4g})")
        codec.store.zero_grads()
        T.backward(loss)
        clip_gradients(codec.store, clip_norm)
        adamw_step(codec.store, lr=schedule.lr_at(step), weight_decay=weight_decay)

        for q in range(config.n_q):
            _ema_update(codec.codebooks, q, stage_residuals[q], stage_codes[q],
                        config.ema_decay, config.dead_code_batches, reinit_rng)

        history.append(loss_val)
        if log_every and step % log_every == 0:
            print(f"codec step {step}/{steps} loss {loss_val:.4f}")
    return codec, CodecTrainLog(steps=steps, final_loss=loss_val, loss_history=history)
