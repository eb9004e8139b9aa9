"""Waveform synthesis, STFT analysis, SNR-controlled mixing, and the
log-spectrogram distance used for evaluation.

Three synthetic source families stand in for speech, sound events, and music
stems. Each family derives its timbral parameters (fundamental, band edges,
note pattern) deterministically from an identity seed, so one identity always
sounds like itself while a separate content seed varies the realization.
"""

from __future__ import annotations

import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ClippingError, ValidationError
from .rng import stream

DEFAULT_SAMPLE_RATE = 16_000
SYNTH_PEAK = 0.7  # headroom before mixing; contract caps synthesis peaks at 0.95
FAMILIES = ("harmonic", "noiseband", "arpeggio")

_LOG_EPS = 1e-5


@dataclass(frozen=True)
class Waveform:
    """Mono audio in [-1, 1] at a fixed sample rate."""

    samples: np.ndarray
    sample_rate_hz: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1 or samples.size < 1:
            raise ValidationError("waveform must be a non-empty 1-D sample array")
        if self.sample_rate_hz <= 0:
            raise ValidationError(f"sample rate must be positive, got {self.sample_rate_hz}")
        peak = float(np.max(np.abs(samples)))
        if peak > 1.0:
            raise ClippingError(f"waveform peak {peak:.6f} exceeds 1.0")
        object.__setattr__(self, "samples", samples)

    def __len__(self) -> int:
        return int(self.samples.size)

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.sample_rate_hz


@dataclass(frozen=True)
class Spectrogram:
    """Frame-by-bin STFT magnitudes (nonnegative)."""

    magnitudes: np.ndarray  # (frames, bins)
    window_size: int
    hop_size: int


@dataclass(frozen=True)
class SourceSpec:
    """One synthetic source identity within a family."""

    family: str
    identity_seed: int
    gain: float = 1.0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValidationError(f"unknown source family {self.family!r}; expected one of {FAMILIES}")
        if self.gain < 0:
            raise ValidationError("gain must be nonnegative")


@dataclass(frozen=True)
class MixResult:
    """Mixture plus the jointly rescaled constituents and scale bookkeeping."""

    mixture: Waveform
    interference_gain: float  # linear scale applied to interference for the target SNR
    peak_rescale: float  # joint factor applied to mixture and references (1.0 if no clipping)
    target: Waveform  # reference target after any joint rescale
    interference: Waveform  # reference (gain-scaled) interference after any joint rescale


def identity_params(spec: SourceSpec) -> dict:
    """Timbral parameters derived from the identity seed (content-independent)."""
    rng = stream(spec.identity_seed, "identity", spec.family)
    if spec.family == "harmonic":
        f0 = float(np.exp(rng.uniform(np.log(110.0), np.log(392.0))))
        n_harm = int(min(10, 7200.0 // f0))
        rolloff = rng.uniform(0.5, 0.8)
        shape = 0.7 + 0.6 * rng.random(n_harm)
        amps = shape * rolloff ** np.arange(n_harm)
        return {
            "f0_hz": f0,
            "harmonic_amps": amps / np.max(amps),
            "vibrato_rate_hz": float(rng.uniform(4.0, 7.0)),
            "vibrato_depth": float(rng.uniform(0.001, 0.004)),
        }
    if spec.family == "noiseband":
        center = float(np.exp(rng.uniform(np.log(700.0), np.log(5200.0))))
        bandwidth = float(rng.uniform(400.0, 900.0))
        lo = max(100.0, center - bandwidth / 2)
        hi = min(7400.0, center + bandwidth / 2)
        return {"band_lo_hz": lo, "band_hi_hz": hi, "edge_hz": 100.0,
                "am_rate_hz": float(rng.uniform(0.5, 2.0)), "am_depth": float(rng.uniform(0.2, 0.5))}
    # arpeggio
    scales = ((0, 3, 5, 7, 10), (0, 2, 4, 7, 9), (0, 2, 3, 7, 8))
    scale = scales[int(rng.integers(len(scales)))]
    degrees = rng.choice(len(scale), size=6, replace=True)
    pattern = [scale[d] + 12 * int(rng.random() < 0.25) for d in degrees]
    return {
        "root_midi": int(rng.integers(45, 70)),
        "pattern_semitones": tuple(pattern),
        "note_rate_hz": float(rng.uniform(2.5, 5.0)),
        "overtone_mix": (float(rng.uniform(0.2, 0.6)), float(rng.uniform(0.05, 0.25))),
        "decay_s": float(rng.uniform(0.15, 0.4)),
    }


def _harmonic(params: dict, t: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    f0 = params["f0_hz"]
    amps = params["harmonic_amps"]
    vr, vd = params["vibrato_rate_hz"], params["vibrato_depth"]
    phi_v = rng.uniform(0, 2 * np.pi)
    # phase of a vibrato-modulated fundamental; harmonics stay phase-locked
    base = 2 * np.pi * f0 * (t - vd / (2 * np.pi * vr) * (np.cos(2 * np.pi * vr * t + phi_v) - np.cos(phi_v)))
    phases = rng.uniform(0, 2 * np.pi, size=amps.size)
    x = np.zeros_like(t)
    for k, (a, ph) in enumerate(zip(amps, phases), start=1):
        x += a * np.sin(k * base + ph)
    env = 1.0 + 0.25 * np.sin(2 * np.pi * rng.uniform(0.2, 0.8) * t + rng.uniform(0, 2 * np.pi))
    return x * env


def _noiseband(params: dict, t: np.ndarray, rng: np.random.Generator, fs: int) -> np.ndarray:
    n = t.size
    white = rng.standard_normal(n)
    spec = np.fft.rfft(white)
    freqs = np.fft.rfftfreq(n, d=1.0 / fs)
    lo, hi, edge = params["band_lo_hz"], params["band_hi_hz"], params["edge_hz"]
    mask = np.zeros_like(freqs)
    inside = (freqs >= lo) & (freqs <= hi)
    mask[inside] = 1.0
    rise = (freqs > lo - edge) & (freqs < lo)
    mask[rise] = 0.5 * (1 + np.cos(np.pi * (lo - freqs[rise]) / edge))
    fall = (freqs > hi) & (freqs < hi + edge)
    mask[fall] = 0.5 * (1 + np.cos(np.pi * (freqs[fall] - hi) / edge))
    x = np.fft.irfft(spec * mask, n=n)
    am = 1.0 + params["am_depth"] * np.sin(2 * np.pi * params["am_rate_hz"] * t + rng.uniform(0, 2 * np.pi))
    return x * am


def _arpeggio(params: dict, t: np.ndarray, rng: np.random.Generator, fs: int) -> np.ndarray:
    pattern = params["pattern_semitones"]
    rate = params["note_rate_hz"]
    b2, b3 = params["overtone_mix"]
    decay = params["decay_s"]
    rotation = int(rng.integers(len(pattern)))
    note_len = 1.0 / rate
    n_notes = int(np.ceil(t[-1] * rate)) + 1
    x = np.zeros_like(t)
    for i in range(n_notes):
        onset = i * note_len
        semis = params["root_midi"] + pattern[(i + rotation) % len(pattern)]
        f = 440.0 * 2 ** ((semis - 69) / 12)
        idx0 = int(np.floor(onset * fs))
        if idx0 >= t.size:
            break
        seg = t[idx0:] - onset
        seg = seg[seg < note_len * 1.5]  # let tails overlap the next note slightly
        amp = 1.0 + 0.1 * (2 * rng.random() - 1)
        env = amp * np.exp(-seg / decay)
        tone = np.sin(2 * np.pi * f * seg) + b2 * np.sin(4 * np.pi * f * seg) + b3 * np.sin(6 * np.pi * f * seg)
        x[idx0:idx0 + seg.size] += env * tone
    return x


def synthesize(spec: SourceSpec, duration_s: float, sample_rate_hz: int = DEFAULT_SAMPLE_RATE,
               seed: int = 0) -> Waveform:
    """Render one source realization; deterministic in (spec, duration, rate, seed)."""
    if duration_s <= 0:
        raise ValidationError(f"duration must be positive, got {duration_s}")
    if sample_rate_hz <= 0:
        raise ValidationError(f"sample rate must be positive, got {sample_rate_hz}")
    n = int(round(duration_s * sample_rate_hz))
    if spec.gain == 0.0:
        return Waveform(np.zeros(n), sample_rate_hz)
    t = np.arange(n, dtype=np.float64) / sample_rate_hz
    params = identity_params(spec)
    rng = stream(seed, "content", spec.family, spec.identity_seed)
    if spec.family == "harmonic":
        x = _harmonic(params, t, rng)
    elif spec.family == "noiseband":
        x = _noiseband(params, t, rng, sample_rate_hz)
    else:
        x = _arpeggio(params, t, rng, sample_rate_hz)
    fade = min(int(0.01 * sample_rate_hz), n // 4)
    if fade > 0:
        ramp = 0.5 - 0.5 * np.cos(np.linspace(0, np.pi, fade))
        x[:fade] *= ramp
        x[-fade:] *= ramp[::-1]
    peak = float(np.max(np.abs(x)))
    if peak > 0:
        x = x * (SYNTH_PEAK * spec.gain / peak)
    out_peak = SYNTH_PEAK * spec.gain
    if out_peak > 0.95:
        raise ClippingError(f"gain {spec.gain} pushes synthesis peak to {out_peak:.3f} > 0.95")
    return Waveform(x, sample_rate_hz)


def _check_aligned(a: Waveform, b: Waveform) -> None:
    if len(a) != len(b):
        raise ValidationError(f"length mismatch: {len(a)} vs {len(b)}")
    if a.sample_rate_hz != b.sample_rate_hz:
        raise ValidationError(f"sample rate mismatch: {a.sample_rate_hz} vs {b.sample_rate_hz}")


def mix_components(target: Waveform, interference: Waveform, snr_db: float) -> MixResult:
    """Mix target + scaled interference at an exact SNR, with joint peak rescue.

    The interference is scaled by g = sqrt((E_t/E_i) * 10^(-snr/10)). If the
    sum would clip, mixture and both references are rescaled by one common
    factor, which preserves the realized SNR exactly.
    """
    _check_aligned(target, interference)
    e_t = float(np.sum(target.samples ** 2))
    e_i = float(np.sum(interference.samples ** 2))
    if e_t == 0.0 or e_i == 0.0:
        raise ValidationError("mixing requires nonzero-energy target and interference")
    g = float(np.sqrt((e_t / e_i) * 10.0 ** (-snr_db / 10.0)))
    scaled_i = g * interference.samples
    mix = target.samples + scaled_i
    peak = float(np.max(np.abs(mix)))
    factor = 1.0 if peak <= 1.0 else 1.0 / peak
    return MixResult(
        mixture=Waveform(mix * factor, target.sample_rate_hz),
        interference_gain=g,
        peak_rescale=factor,
        target=Waveform(target.samples * factor, target.sample_rate_hz),
        interference=Waveform(scaled_i * factor, target.sample_rate_hz),
    )


def mix_at_snr(target: Waveform, interference: Waveform, snr_db: float) -> tuple[Waveform, float]:
    """Mixture at the requested SNR and the interference scale g that realized it."""
    res = mix_components(target, interference, snr_db)
    return res.mixture, res.interference_gain


def hann_window(size: int) -> np.ndarray:
    # periodic Hann, the STFT analysis convention used throughout
    return 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(size) / size)


def stft(w: Waveform, window_size: int, hop_size: int) -> Spectrogram:
    """Magnitude STFT over left-aligned frames, no padding."""
    if not (window_size >= hop_size >= 1):
        raise ValidationError(f"need window_size >= hop_size >= 1, got {window_size}/{hop_size}")
    if len(w) < window_size:
        raise ValidationError(f"signal of {len(w)} samples is shorter than one {window_size} window")
    frames = np.lib.stride_tricks.sliding_window_view(w.samples, window_size)[::hop_size]
    mags = np.abs(np.fft.rfft(frames * hann_window(window_size), axis=1))
    return Spectrogram(magnitudes=mags, window_size=window_size, hop_size=hop_size)


def stft_distance(a: Waveform, b: Waveform, window_size: int = 1024, hop_size: int = 256,
                  eps: float = _LOG_EPS, multi_resolution: bool = False) -> float:
    """Mean |log(mag+eps) - log(mag+eps)| between two equally long waveforms.

    Symmetric, nonnegative, zero on identical inputs. Callers align lengths
    before calling; mismatched lengths are an error, never trimmed silently.
    With multi_resolution=True the distance is averaged over 512/128,
    1024/256, and 2048/512 windows instead of the single default resolution.
    """
    _check_aligned(a, b)
    resolutions = ((512, 128), (1024, 256), (2048, 512)) if multi_resolution else ((window_size, hop_size),)
    vals = []
    for win, hop in resolutions:
        sa = stft(a, win, hop).magnitudes
        sb = stft(b, win, hop).magnitudes
        vals.append(float(np.mean(np.abs(np.log(sa + eps) - np.log(sb + eps)))))
    return float(np.mean(vals))


def write_wav(path: str | Path, w: Waveform) -> None:
    """PCM 16-bit signed little-endian mono; amplitudes scaled by 32768 with saturation."""
    q = np.clip(np.round(w.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(w.sample_rate_hz)
        f.writeframes(q.tobytes())


def read_wav(path: str | Path) -> Waveform:
    with wave.open(str(path), "rb") as f:
        if f.getnchannels() != 1 or f.getsampwidth() != 2:
            raise ValidationError(f"{path}: expected 16-bit mono PCM")
        rate = f.getframerate()
        raw = f.readframes(f.getnframes())
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return Waveform(samples, rate)
