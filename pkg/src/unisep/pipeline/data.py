"""Triple simulation: synthetic (mixture, prompt, target) examples.

Two prompting schemes. SEPARATE_PROMPT renders the prompt as a fresh
realization of the target identity, disjoint from the mixed content.
WINDOWED_PROMPT renders one longer source and splits it in half: the first
half becomes the prompt, only the second half is mixed, so concatenating
prompt and target reproduces the rendered source sample-for-sample.

Amplitudes are chosen so the mixture can never clip: the target-side gain
is capped at 0.95 / (peak(target) + g * peak(interference)), with g the
interference scale the SNR will require. The cap keeps the joint rescale
inside mix_components at exactly 1.0, which is what makes the windowed
reconstruction identity exact and the realized SNR equal to the request.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from ..errors import ValidationError
from ..rng import stream
from ..signal import (
    FAMILIES,
    MixResult,
    SourceSpec,
    Waveform,
    mix_components,
    read_wav,
    synthesize,
    write_wav,
)

SEPARATE_PROMPT = "separate_prompt"
WINDOWED_PROMPT = "windowed_prompt"

_GAIN_LO = 0.3
_GAIN_HI = 0.7
_PEAK_CAP = 0.95
_SEED_SPAN = 2 ** 31


@dataclass(frozen=True)
class DataConfig:
    families: tuple = FAMILIES
    identities_per_family: int = 8
    family_weights: tuple = ()  # empty = uniform
    target_min_s: float = 3.0
    target_max_s: float = 5.0
    prompt_min_s: float = 2.0
    prompt_max_s: float = 3.0
    windowed_fraction: float = 0.3
    windowed_total_s: float = 4.0
    snr_min_db: float = -5.0
    snr_max_db: float = 10.0
    sample_rate_hz: int = 16000
    frame_hop_samples: int = 160
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "families", tuple(self.families))
        object.__setattr__(self, "family_weights", tuple(self.family_weights))
        if not self.families:
            raise ValidationError("data config: families must be non-empty")
        for fam in self.families:
            if fam not in FAMILIES:
                raise ValidationError(f"data config: unknown family {fam!r}")
        if self.identities_per_family < 1:
            raise ValidationError("data config: identities_per_family must be >= 1")
        if self.family_weights:
            if len(self.family_weights) != len(self.families):
                raise ValidationError(
                    "data config: family_weights length must match families")
            if min(self.family_weights) < 0 or sum(self.family_weights) <= 0:
                raise ValidationError(
                    "data config: family_weights must be nonnegative with a "
                    "positive sum")
        for lo, hi, what in ((self.target_min_s, self.target_max_s, "target"),
                             (self.prompt_min_s, self.prompt_max_s, "prompt")):
            if not 0 < lo <= hi:
                raise ValidationError(
                    f"data config: need 0 < {what}_min_s <= {what}_max_s")
        if not 0.0 <= self.windowed_fraction <= 1.0:
            raise ValidationError(
                "data config: windowed_fraction must be in [0, 1]")
        if self.windowed_total_s <= 0:
            raise ValidationError("data config: windowed_total_s must be positive")
        if self.snr_min_db > self.snr_max_db:
            raise ValidationError("data config: snr_min_db > snr_max_db")
        if self.sample_rate_hz < 1 or self.frame_hop_samples < 1:
            raise ValidationError(
                "data config: sample_rate_hz and frame_hop_samples must be >= 1")
        if self.seed < 0:
            raise ValidationError("data config: seed must be >= 0")

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["families"] = list(d["families"])
        d["family_weights"] = list(d["family_weights"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DataConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown data config keys: {sorted(unknown)}")
        return cls(**d)

    def identity_pool(self) -> list:
        return [SourceSpec(family=fam, identity_seed=i)
                for fam in self.families
                for i in range(self.identities_per_family)]


@dataclass(frozen=True)
class MixtureTriple:
    """One training or evaluation example, amplitude-consistent throughout."""

    mixture: Waveform
    prompt: Waveform
    target: Waveform
    interference: Waveform  # the scaled interferer actually inside the mixture
    target_identity: SourceSpec
    interference_identity: SourceSpec
    snr_db: float
    scheme: str

    def __post_init__(self):
        if self.scheme not in (SEPARATE_PROMPT, WINDOWED_PROMPT):
            raise ValidationError(f"unknown prompting scheme {self.scheme!r}")
        tid = (self.target_identity.family, self.target_identity.identity_seed)
        iid = (self.interference_identity.family,
               self.interference_identity.identity_seed)
        if tid == iid:
            raise ValidationError(
                "target and interference must be different identities")
        rates = {w.sample_rate_hz for w in
                 (self.mixture, self.prompt, self.target, self.interference)}
        if len(rates) != 1:
            raise ValidationError(f"sample rates disagree: {sorted(rates)}")
        if not (len(self.mixture) == len(self.target) == len(self.interference)):
            raise ValidationError(
                "mixture, target, and interference must be equally long")
        if not np.isfinite(self.snr_db):
            raise ValidationError("snr_db must be finite")


def _round_to_hops(duration_s: float, config: DataConfig) -> int:
    hop = config.frame_hop_samples
    n = int(round(duration_s * config.sample_rate_hz / hop)) * hop
    return max(hop, n)


def _draw_identity(rng, config: DataConfig, exclude=None) -> SourceSpec:
    pool = config.identity_pool()
    if exclude is not None:
        key = (exclude.family, exclude.identity_seed)
        pool = [s for s in pool if (s.family, s.identity_seed) != key]
    if not pool:
        raise ValidationError("identity pool must contain at least 2 identities")
    if exclude is None and config.family_weights:
        weights = np.repeat(np.asarray(config.family_weights, dtype=np.float64),
                            config.identities_per_family)
        weights = weights / weights.sum()
        return pool[int(rng.choice(len(pool), p=weights))]
    return pool[int(rng.integers(len(pool)))]


def _mix_without_clipping(target_unit: Waveform, interferer: Waveform,
                          snr_db: float, gain: float) -> tuple[MixResult, float]:
    """Scale the target by min(gain, cap) so the mixture stays within [-1, 1]."""
    e_t = float(np.sum(target_unit.samples ** 2))
    e_i = float(np.sum(interferer.samples ** 2))
    if e_t == 0.0 or e_i == 0.0:
        raise ValidationError("sources must have nonzero energy")
    g0 = float(np.sqrt((e_t / e_i) * 10.0 ** (-snr_db / 10.0)))
    bound = float(np.max(np.abs(target_unit.samples))
                  + g0 * np.max(np.abs(interferer.samples)))
    u = min(gain, _PEAK_CAP / bound)
    scaled = Waveform(u * target_unit.samples, target_unit.sample_rate_hz)
    res = mix_components(scaled, interferer, snr_db)
    if res.peak_rescale != 1.0:
        raise ValidationError("clip-free gain bound failed")  # unreachable by construction
    return res, u


def _simulate_one(index: int, config: DataConfig, seed: int) -> MixtureTriple:
    rng = stream(seed, "triple", index)
    # Draw order is part of the determinism contract; append new draws only.
    windowed = bool(rng.random() < config.windowed_fraction)
    target_id = _draw_identity(rng, config)
    interferer_id = _draw_identity(rng, config, exclude=target_id)
    snr_db = float(rng.uniform(config.snr_min_db, config.snr_max_db))
    target_seed = int(rng.integers(_SEED_SPAN))
    prompt_seed = int(rng.integers(_SEED_SPAN))
    interferer_seed = int(rng.integers(_SEED_SPAN))
    gain = float(rng.uniform(_GAIN_LO, _GAIN_HI))
    prompt_gain = float(rng.uniform(_GAIN_LO, _GAIN_HI))
    target_n = _round_to_hops(float(rng.uniform(config.target_min_s,
                                                config.target_max_s)), config)
    prompt_n = _round_to_hops(float(rng.uniform(config.prompt_min_s,
                                                config.prompt_max_s)), config)
    sr = config.sample_rate_hz

    if windowed:
        half_n = _round_to_hops(config.windowed_total_s / 2.0, config)
        source = synthesize(target_id, 2 * half_n / sr, sample_rate_hz=sr,
                            seed=target_seed)
        interferer = synthesize(interferer_id, half_n / sr, sample_rate_hz=sr,
                                seed=interferer_seed)
        tail = Waveform(source.samples[half_n:], sr)
        res, u = _mix_without_clipping(tail, interferer, snr_db, gain)
        prompt = Waveform(u * source.samples[:half_n], sr)
        scheme = WINDOWED_PROMPT
    else:
        target = synthesize(target_id, target_n / sr, sample_rate_hz=sr,
                            seed=target_seed)
        interferer = synthesize(interferer_id, target_n / sr, sample_rate_hz=sr,
                                seed=interferer_seed)
        res, _ = _mix_without_clipping(target, interferer, snr_db, gain)
        raw_prompt = synthesize(target_id, prompt_n / sr, sample_rate_hz=sr,
                                seed=prompt_seed)
        prompt = Waveform(prompt_gain * raw_prompt.samples, sr)
        scheme = SEPARATE_PROMPT

    return MixtureTriple(
        mixture=res.mixture, prompt=prompt, target=res.target,
        interference=res.interference, target_identity=target_id,
        interference_identity=interferer_id, snr_db=snr_db, scheme=scheme)


def simulate_triples(n: int, config: DataConfig, seed: int = 0) -> list:
    """n deterministic triples; triple i depends only on (config, seed, i)."""
    if n < 1:
        raise ValidationError(f"need n >= 1 triples, got {n}")
    if len(config.identity_pool()) < 2:
        raise ValidationError("identity pool must contain at least 2 identities")
    return [_simulate_one(i, config, seed) for i in range(n)]


def build_codec_corpus(config: DataConfig, seed: int = 0, *,
                       items_per_family: int = 16, duration_s: float = 2.0,
                       mixture_items: int = 12) -> list:
    """Waveforms for codec training: single sources plus a few mixtures.

    Mixtures are included because the separation pipeline tokenizes mixture
    audio with this codec; columns of summed sources would otherwise be
    outside everything the quantizer was fit on.
    """
    if items_per_family < 1 or duration_s <= 0 or mixture_items < 0:
        raise ValidationError("corpus recipe values out of range")
    items = []
    for fam_idx, fam in enumerate(config.families):
        for k in range(items_per_family):
            rng = stream(seed, "codec-corpus", fam_idx, k)
            spec = SourceSpec(family=fam,
                              identity_seed=k % config.identities_per_family)
            unit = synthesize(spec, duration_s,
                              sample_rate_hz=config.sample_rate_hz,
                              seed=int(rng.integers(_SEED_SPAN)))
            gain = float(rng.uniform(_GAIN_LO, _GAIN_HI))
            items.append(Waveform(gain * unit.samples, config.sample_rate_hz))
    for k in range(mixture_items):
        rng = stream(seed, "codec-corpus-mix", k)
        a = _draw_identity(rng, config)
        b = _draw_identity(rng, config, exclude=a)
        snr = float(rng.uniform(config.snr_min_db, config.snr_max_db))
        x = synthesize(a, duration_s, sample_rate_hz=config.sample_rate_hz,
                       seed=int(rng.integers(_SEED_SPAN)))
        y = synthesize(b, duration_s, sample_rate_hz=config.sample_rate_hz,
                       seed=int(rng.integers(_SEED_SPAN)))
        gain = float(rng.uniform(_GAIN_LO, _GAIN_HI))
        res, _ = _mix_without_clipping(x, y, snr, gain)
        items.append(res.mixture)
    return items


def _spec_dict(spec: SourceSpec) -> dict:
    return {"family": spec.family, "identity_seed": spec.identity_seed}


def write_triples(out_dir, triples: list) -> Path:
    """WAV files plus a manifest.jsonl of records with relative paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if not triples:
        raise ValidationError("no triples to write")
    records = []
    for i, t in enumerate(triples):
        names = {}
        for part in ("mixture", "prompt", "target", "interference"):
            name = f"{i:05d}_{part}.wav"
            write_wav(out / name, getattr(t, part))
            names[part] = name
        records.append({
            "index": i, **names,
            "target_identity": _spec_dict(t.target_identity),
            "interference_identity": _spec_dict(t.interference_identity),
            "snr_db": t.snr_db, "scheme": t.scheme,
        })
    path = out / "manifest.jsonl"
    with open(path, "w") as f:
        for rec in records:
            f.write(json.dumps(rec, sort_keys=True) + "\n")
    return path


def read_triples(manifest_path) -> list:
    path = Path(manifest_path)
    if path.is_dir():
        path = path / "manifest.jsonl"
    if not path.exists():
        raise ValidationError(f"no triples manifest at {path}")
    triples = []
    base = path.parent
    for line in path.read_text().splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        waves = {part: read_wav(base / rec[part])
                 for part in ("mixture", "prompt", "target", "interference")}
        triples.append(MixtureTriple(
            **waves,
            target_identity=SourceSpec(**rec["target_identity"]),
            interference_identity=SourceSpec(**rec["interference_identity"]),
            snr_db=rec["snr_db"], scheme=rec["scheme"]))
    if not triples:
        raise ValidationError(f"empty triples manifest at {path}")
    return triples
