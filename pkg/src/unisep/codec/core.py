"""Codec data types and the encode / quantize / decode pipeline.

The codec works in the log-magnitude spectral domain. Each non-overlapping
hop of audio owns one analysis column (a Hann-windowed DFT magnitude over a
window that starts at the hop), an MLP encoder maps the column to a latent
frame, and residual VQ snaps the latent to codes stage by stage. Decoding
runs the MLP in reverse to predict log-magnitude columns and renders samples
with an overlap-add phase-retrieval loop. Working in log magnitudes keeps
prediction error multiplicative in the linear domain, so quiet spectral
regions of the reconstruction stay quiet.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .. import kernels
from ..config import canonical_toml, config_hash, parse_toml
from ..errors import ValidationError
from ..numerics import ParameterStore, load_checkpoint, save_checkpoint
from ..numerics import autodiff as T
from ..rng import stream
from ..signal import Waveform, hann_window

MAG_FLOOR = 1e-5


@dataclass(frozen=True)
class CodecConfig:
    sample_rate_hz: int = 16_000
    frame_hop_samples: int = 160
    window_samples: int = 640
    latent_dim: int = 16
    hidden_dim: int = 64
    n_q: int = 3
    codebook_size: int = 256
    ema_decay: float = 0.99
    commitment_weight: float = 0.25
    dead_code_batches: int = 64
    gl_iterations: int = 60
    gl_momentum: float = 0.99

    def __post_init__(self):
        if self.frame_hop_samples < 1 or self.latent_dim < 1 or self.hidden_dim < 1:
            raise ValidationError("codec dims must be positive")
        if self.window_samples < self.frame_hop_samples:
            raise ValidationError(
                f"window_samples {self.window_samples} < frame hop {self.frame_hop_samples}")
        if self.n_q < 1:
            raise ValidationError(f"n_q must be >= 1, got {self.n_q}")
        if not 2 <= self.codebook_size <= 65_535:
            raise ValidationError(f"codebook_size must be in [2, 65535], got {self.codebook_size}")
        if self.gl_iterations < 0:
            raise ValidationError(f"gl_iterations must be >= 0, got {self.gl_iterations}")

    @property
    def num_bins(self) -> int:
        return self.window_samples // 2 + 1

    def to_dict(self) -> dict:
        return {
            "sample_rate_hz": self.sample_rate_hz,
            "frame_hop_samples": self.frame_hop_samples,
            "window_samples": self.window_samples,
            "latent_dim": self.latent_dim,
            "hidden_dim": self.hidden_dim,
            "n_q": self.n_q,
            "codebook_size": self.codebook_size,
            "ema_decay": self.ema_decay,
            "commitment_weight": self.commitment_weight,
            "dead_code_batches": self.dead_code_batches,
            "gl_iterations": self.gl_iterations,
            "gl_momentum": self.gl_momentum,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CodecConfig":
        known = set(cls().to_dict())
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown codec config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class LatentFrames:
    """T x L real matrix of per-hop latent features."""

    frames: np.ndarray
    frame_hop_samples: int

    def __post_init__(self):
        f = np.asarray(self.frames)
        if f.ndim != 2:
            raise ValidationError(f"latent frames must be rank 2, got shape {f.shape}")
        object.__setattr__(self, "frames", f)

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]


@dataclass(frozen=True)
class TokenGrid:
    """T x n_q integer codes, frame-major when flattened."""

    tokens: np.ndarray
    n_q: int
    frame_hop_samples: int
    sample_rate_hz: int
    codebook_size: int

    def __post_init__(self):
        t = np.asarray(self.tokens)
        if t.ndim != 2 or t.shape[1] != self.n_q:
            raise ValidationError(f"tokens must be (T, {self.n_q}), got shape {t.shape}")
        if not np.issubdtype(t.dtype, np.integer):
            raise ValidationError("tokens must be integers")
        if t.size and (t.min() < 0 or t.max() >= self.codebook_size):
            raise ValidationError(
                f"token out of range [0, {self.codebook_size}): min={t.min()} max={t.max()}")
        object.__setattr__(self, "tokens", t.astype(np.int64))

    @property
    def num_frames(self) -> int:
        return self.tokens.shape[0]


@dataclass
class Codebooks:
    """Per-stage centroid tables plus EMA accumulators for k-means training."""

    centroids: np.ndarray  # (n_q, K, L)
    ema_counts: np.ndarray  # (n_q, K)
    ema_sums: np.ndarray  # (n_q, K, L)
    unused_batches: np.ndarray  # (n_q, K) consecutive batches with zero usage

    @classmethod
    def empty(cls, n_q: int, codebook_size: int, latent_dim: int) -> "Codebooks":
        return cls(
            centroids=np.zeros((n_q, codebook_size, latent_dim), dtype=np.float32),
            ema_counts=np.zeros((n_q, codebook_size), dtype=np.float64),
            ema_sums=np.zeros((n_q, codebook_size, latent_dim), dtype=np.float64),
            unused_batches=np.zeros((n_q, codebook_size), dtype=np.int64),
        )

    def validate(self) -> None:
        if not np.all(np.isfinite(self.centroids)):
            raise ValidationError("codebook centroids contain non-finite values")
        n_q, k, _ = self.centroids.shape
        if self.ema_counts.shape != (n_q, k):
            raise ValidationError("EMA count shape does not match centroids")


def _init_param(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    return rng.standard_normal(shape) * (1.0 / np.sqrt(fan_in))


class Codec:
    """Framewise MLP encoder/decoder around a residual vector quantizer."""

    def __init__(self, config: CodecConfig, store: ParameterStore | None = None,
                 codebooks: Codebooks | None = None, seed: int = 0):
        self.config = config
        bins = config.num_bins
        if store is None:
            store = ParameterStore()
            c = config
            r = stream(seed, "codec-init")
            store.create("enc.w1", _init_param(r, bins, (bins, c.hidden_dim)))
            store.create("enc.b1", np.zeros(c.hidden_dim))
            store.create("enc.w2", _init_param(r, c.hidden_dim, (c.hidden_dim, c.latent_dim)))
            store.create("enc.b2", np.zeros(c.latent_dim))
            store.create("dec.w1", _init_param(r, c.latent_dim, (c.latent_dim, c.hidden_dim)))
            store.create("dec.b1", np.zeros(c.hidden_dim))
            store.create("dec.w2", _init_param(r, c.hidden_dim, (c.hidden_dim, bins)))
            store.create("dec.b2", np.zeros(bins))
        self.store = store
        self.codebooks = codebooks if codebooks is not None else Codebooks.empty(
            config.n_q, config.codebook_size, config.latent_dim)
        self._window = hann_window(config.window_samples)

    # -------------------------------------------------------------- waveform IO

    def frame(self, x: Waveform) -> np.ndarray:
        """Non-overlapping (T, hop) frames; trailing remainder samples drop."""
        hop = self.config.frame_hop_samples
        if len(x) < hop:
            raise ValidationError(f"waveform of {len(x)} samples is shorter than one {hop}-sample hop")
        if x.sample_rate_hz != self.config.sample_rate_hz:
            raise ValidationError(
                f"waveform rate {x.sample_rate_hz} != codec rate {self.config.sample_rate_hz}")
        t = len(x) // hop
        return x.samples[: t * hop].reshape(t, hop).astype(np.float32)

    def log_mag_frames(self, x: Waveform) -> np.ndarray:
        """One log-magnitude column per hop, (T, num_bins) float32.

        Column t analyzes the window starting at sample t*hop; the tail is
        zero-padded so every hop owns a column.
        """
        c = self.config
        t = self.frame(x).shape[0]
        padded = np.concatenate([
            x.samples[: t * c.frame_hop_samples],
            np.zeros(c.window_samples - c.frame_hop_samples),
        ])
        cols = _sliding_frames(padded, c.window_samples, c.frame_hop_samples)
        mags = np.abs(np.fft.rfft(cols * self._window, axis=1))
        return np.log(mags + MAG_FLOOR).astype(np.float32)

    # ------------------------------------------------------------------ encode

    def encode_frames_t(self, columns: T.Tensor) -> T.Tensor:
        """Differentiable encoder over (T, num_bins) log-magnitude columns."""
        s = self.store
        h = T.gelu(T.add(T.matmul(columns, s["enc.w1"]), s["enc.b1"]))
        return T.add(T.matmul(h, s["enc.w2"]), s["enc.b2"])

    def encode(self, x: Waveform) -> LatentFrames:
        cols = self.log_mag_frames(x)
        h = self.encode_frames_t(T.constant(cols)).data
        return LatentFrames(frames=h, frame_hop_samples=self.config.frame_hop_samples)

    # ---------------------------------------------------------------- quantize

    def rvq_quantize(self, h: LatentFrames) -> tuple[TokenGrid, LatentFrames]:
        """Greedy per-stage nearest-centroid quantization of the residual."""
        c = self.config
        if h.frames.shape[1] != c.latent_dim:
            raise ValidationError(
                f"latent dim {h.frames.shape[1]} != codec latent dim {c.latent_dim}")
        self.codebooks.validate()
        codes, hhat = _rvq_assign(h.frames.astype(np.float32), self.codebooks.centroids)
        grid = TokenGrid(tokens=codes, n_q=c.n_q, frame_hop_samples=c.frame_hop_samples,
                         sample_rate_hz=c.sample_rate_hz, codebook_size=c.codebook_size)
        return grid, LatentFrames(frames=hhat, frame_hop_samples=c.frame_hop_samples)

    def tokenize(self, x: Waveform) -> TokenGrid:
        grid, _ = self.rvq_quantize(self.encode(x))
        return grid

    # ------------------------------------------------------------------ decode

    def decode_frames_t(self, latents: T.Tensor) -> T.Tensor:
        """Differentiable decoder from (T, L) latents to (T, num_bins) columns."""
        s = self.store
        h = T.gelu(T.add(T.matmul(latents, s["dec.w1"]), s["dec.b1"]))
        return T.add(T.matmul(h, s["dec.w2"]), s["dec.b2"])

    def latents_of(self, grid: TokenGrid) -> LatentFrames:
        """Sum of selected centroids per frame."""
        c = self.config
        if grid.n_q != c.n_q or grid.codebook_size != c.codebook_size:
            raise ValidationError("token grid geometry does not match codec config")
        hhat = np.zeros((grid.num_frames, c.latent_dim), dtype=np.float32)
        for q in range(c.n_q):
            hhat += self.codebooks.centroids[q][grid.tokens[:, q]]
        return LatentFrames(frames=hhat, frame_hop_samples=c.frame_hop_samples)

    def decode(self, latents_or_grid: LatentFrames | TokenGrid) -> Waveform:
        if isinstance(latents_or_grid, TokenGrid):
            latents = self.latents_of(latents_or_grid)
        else:
            latents = latents_or_grid
        cols = self.decode_frames_t(T.constant(latents.frames.astype(np.float32))).data
        mags = np.maximum(np.exp(cols.astype(np.float64)) - MAG_FLOOR, 0.0)
        c = self.config
        samples = _phase_retrieve(mags, self._window, c.frame_hop_samples,
                                  iters=c.gl_iterations, momentum=c.gl_momentum)
        samples = samples[: latents.num_frames * c.frame_hop_samples]
        peak = np.abs(samples).max() if samples.size else 0.0
        if peak > 1.0:
            samples = samples / peak
        return Waveform(np.clip(samples, -1.0, 1.0), c.sample_rate_hz)

    def reconstruct(self, x: Waveform) -> Waveform:
        """decode(quantize(encode(x))), the codec round trip."""
        _, hhat = self.rvq_quantize(self.encode(x))
        return self.decode(hhat)


def _sliding_frames(x: np.ndarray, window: int, hop: int) -> np.ndarray:
    n = (len(x) - window) // hop + 1
    idx = np.arange(window)[None, :] + hop * np.arange(n)[:, None]
    return x[idx]


def _overlap_add(spec: np.ndarray, window: np.ndarray, hop: int, length: int) -> np.ndarray:
    """Windowed inverse DFT columns summed at hop offsets, envelope-normalized."""
    win = len(window)
    frames = np.fft.irfft(spec, n=win, axis=1) * window
    out = np.zeros(length)
    den = np.zeros(length)
    for m in range(frames.shape[0]):
        out[m * hop:m * hop + win] += frames[m]
        den[m * hop:m * hop + win] += window * window
    # the envelope floor only matters in the first/last window of the signal,
    # where partial overlap would otherwise amplify inconsistent columns
    return out / np.maximum(den, 1e-3)


def _phase_retrieve(mags: np.ndarray, window: np.ndarray, hop: int,
                    iters: int, momentum: float) -> np.ndarray:
    """Iterative overlap-add phase reconstruction for a magnitude grid.

    Deterministic: the initial phases come from a fixed seed, so equal
    magnitude grids always render identical samples.
    """
    t = mags.shape[0]
    win = len(window)
    length = (t - 1) * hop + win
    rng = stream(0, "codec-phase-init")
    angles = np.exp(2j * np.pi * rng.random(mags.shape))
    prev = None
    for _ in range(iters):
        x = _overlap_add(mags * angles, window, hop, length)
        spec = np.fft.rfft(_sliding_frames(x, win, hop) * window, axis=1)
        if prev is not None:
            spec = spec + momentum * (spec - prev)
        prev = spec
        angles = spec / np.maximum(np.abs(spec), 1e-12)
    return _overlap_add(mags * angles, window, hop, length)


def _rvq_assign(frames: np.ndarray, centroids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Stage-wise nearest-centroid codes and the summed reconstruction."""
    n_q = centroids.shape[0]
    residual = frames.copy()
    codes = np.empty((frames.shape[0], n_q), dtype=np.int64)
    hhat = np.zeros_like(frames)
    for q in range(n_q):
        idx = kernels.nearest_code(residual.astype(np.float64),
                                   centroids[q].astype(np.float64))
        chosen = centroids[q][idx]
        codes[:, q] = idx
        hhat += chosen
        residual -= chosen
    return codes, hhat


# ------------------------------------------------------------------ checkpoint

def save_codec(path: str | Path, codec: Codec, step: int = 0) -> None:
    """Parameters plus a codebook section in one checkpoint file."""
    cb = codec.codebooks
    merged = ParameterStore()
    for name in codec.store.names():
        merged.create(name, codec.store[name].data)
    merged.create("quantizer.centroids", cb.centroids)
    merged.create("quantizer.ema_counts", cb.ema_counts)
    merged.create("quantizer.ema_sums", cb.ema_sums)
    sections = {"codec": codec.config.to_dict()}
    save_checkpoint(path, merged, step=step, config_hash=config_hash(sections),
                    config_text=canonical_toml(sections))


def load_codec(path: str | Path) -> Codec:
    ck = load_checkpoint(path)
    if not ck.config_text:
        raise ValidationError(f"{path}: checkpoint carries no codec config")
    sections = parse_toml(ck.config_text)
    if "codec" not in sections:
        raise ValidationError(f"{path}: checkpoint config has no [codec] section")
    config = CodecConfig.from_dict(sections["codec"])
    store = ParameterStore()
    cb = Codebooks.empty(config.n_q, config.codebook_size, config.latent_dim)
    for name, arr in ck.values.items():
        if name == "quantizer.centroids":
            cb.centroids = arr.astype(np.float32)
        elif name == "quantizer.ema_counts":
            cb.ema_counts = arr.astype(np.float64)
        elif name == "quantizer.ema_sums":
            cb.ema_sums = arr.astype(np.float64)
        elif name.startswith("quantizer."):
            raise ValidationError(f"{path}: unknown quantizer record {name!r}")
        else:
            store.create(name, arr)
    expect = (config.n_q, config.codebook_size, config.latent_dim)
    if cb.centroids.shape != expect:
        raise ValidationError(
            f"{path}: codebook shape {cb.centroids.shape} does not match config {expect}")
    cb.validate()
    return Codec(config, store=store, codebooks=cb)
