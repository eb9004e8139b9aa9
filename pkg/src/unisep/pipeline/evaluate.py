"""Evaluation against codec-reconstructed references.

The reference for every metric is the codec's reconstruction of the true
target, never the raw waveform: the model can at best emit the tokens of
the target, so comparing against what those tokens decode to isolates
separation quality from codec quality. The baseline each item must beat is
the codec reconstruction of the mixture scored against that same reference.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from ..errors import ValidationError
from ..model.core import ModelConfig
from ..model.infer import GREEDY, Sampling
from ..rng import stream
from ..sequence import CAUSAL
from ..signal import Waveform, stft_distance, synthesize
from .data import MixtureTriple
from .inference import separate

_METRIC_WINDOW = 1024
_GAIN_LO = 0.3
_GAIN_HI = 0.7


@dataclass(frozen=True)
class EvalItem:
    index: int
    output_distance: float
    baseline_distance: float
    win: bool
    truncated: bool
    generated_frames: int
    aligned_samples: int
    snr_db: float
    scheme: str


@dataclass(frozen=True)
class EvalReport:
    items: tuple
    mean_output_distance: float
    mean_baseline_distance: float
    win_rate: float

    @property
    def n(self) -> int:
        return len(self.items)

    def to_json_dict(self) -> dict:
        return {
            "n": self.n,
            "mean_output_distance": self.mean_output_distance,
            "mean_baseline_distance": self.mean_baseline_distance,
            "win_rate": self.win_rate,
            "items": [asdict(i) for i in self.items],
        }


def codec_reference(codec, wave: Waveform) -> Waveform:
    """The reconstruction the evaluation treats as ground truth."""
    return codec.decode(codec.tokenize(wave))


def _aligned_distance(out: Waveform, ref: Waveform) -> tuple[float, int]:
    """Distance after truncating both to the shorter; returns aligned length.

    An output shorter than one analysis window cannot produce a spectral
    frame; it is scored as zero-padded to one window against the reference's
    first window, which such a degenerate output essentially never wins.
    """
    n = min(len(out), len(ref))
    if n >= _METRIC_WINDOW:
        a = Waveform(out.samples[:n], out.sample_rate_hz)
        b = Waveform(ref.samples[:n], ref.sample_rate_hz)
        return stft_distance(a, b), n
    w = min(_METRIC_WINDOW, len(ref))
    padded = np.zeros(w)
    padded[:n] = out.samples[:n]
    return stft_distance(Waveform(padded, out.sample_rate_hz),
                         Waveform(ref.samples[:w], ref.sample_rate_hz)), n


def score_outputs(codec, triples: list, outputs: list, *,
                  truncated_flags: list | None = None,
                  generated_frames: list | None = None) -> EvalReport:
    """EvalReport for precomputed separated outputs, one per triple."""
    if not triples:
        raise ValidationError("empty evaluation set")
    if len(outputs) != len(triples):
        raise ValidationError(
            f"{len(outputs)} outputs for {len(triples)} triples")
    truncated_flags = truncated_flags or [False] * len(triples)
    generated_frames = generated_frames or [0] * len(triples)
    items = []
    for i, (t, out) in enumerate(zip(triples, outputs)):
        reference = codec_reference(codec, t.target)
        mixture_recon = codec_reference(codec, t.mixture)
        baseline, _ = _aligned_distance(mixture_recon, reference)
        distance, aligned = _aligned_distance(out, reference)
        items.append(EvalItem(
            index=i, output_distance=distance, baseline_distance=baseline,
            win=bool(distance < baseline), truncated=bool(truncated_flags[i]),
            generated_frames=int(generated_frames[i]), aligned_samples=aligned,
            snr_db=t.snr_db, scheme=t.scheme))
    return EvalReport(
        items=tuple(items),
        mean_output_distance=float(np.mean([i.output_distance for i in items])),
        mean_baseline_distance=float(np.mean([i.baseline_distance for i in items])),
        win_rate=float(np.mean([i.win for i in items])))


def _item_seed(seed: int, index: int) -> int:
    return int(stream(seed, "eval-item", index).integers(2 ** 31))


def run_separations(store, model_config: ModelConfig, codec, triples: list, *,
                    sampling: Sampling = GREEDY, seed: int = 0,
                    attention_mode: str = CAUSAL,
                    max_new_frames: int | None = None,
                    prompts: list | None = None) -> list:
    """One SeparationResult per triple, with per-item derived seeds."""
    prompts = prompts if prompts is not None else [t.prompt for t in triples]
    results = []
    for i, t in enumerate(triples):
        results.append(separate(
            store, model_config, codec, t.mixture, prompts[i],
            sampling=sampling, seed=_item_seed(seed, i),
            attention_mode=attention_mode, max_new_frames=max_new_frames))
    return results


def evaluate(store, model_config: ModelConfig, codec, triples: list, *,
             sampling: Sampling = GREEDY, seed: int = 0,
             attention_mode: str = CAUSAL,
             max_new_frames: int | None = None) -> EvalReport:
    """Separate every triple and score it against codec references."""
    if not triples:
        raise ValidationError("empty evaluation set")
    results = run_separations(store, model_config, codec, triples,
                              sampling=sampling, seed=seed,
                              attention_mode=attention_mode,
                              max_new_frames=max_new_frames)
    return score_outputs(
        codec, triples, [r.waveform for r in results],
        truncated_flags=[r.truncated for r in results],
        generated_frames=[r.generated_frames for r in results])


def write_report(report: EvalReport, out_dir) -> tuple[Path, Path]:
    """report.json plus a flat per-item report.csv."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    json_path = out / "report.json"
    json_path.write_text(json.dumps(report.to_json_dict(), indent=2,
                                    sort_keys=True) + "\n")
    csv_path = out / "report.csv"
    with open(csv_path, "w", newline="") as f:
        writer = csv.writer(f)
        columns = ["index", "output_distance", "baseline_distance", "win",
                   "truncated", "generated_frames", "aligned_samples",
                   "snr_db", "scheme"]
        writer.writerow(columns)
        for item in report.items:
            d = asdict(item)
            writer.writerow([d[c] for c in columns])
    return json_path, csv_path


@dataclass(frozen=True)
class PromptSwapItem:
    index: int
    match_nearer: str  # "target" | "interference"
    swap_nearer: str
    flipped: bool
    match_target_distance: float
    match_interference_distance: float
    swap_target_distance: float
    swap_interference_distance: float


@dataclass(frozen=True)
class PromptSwapReport:
    items: tuple
    flip_rate: float
    match_target_rate: float
    swap_interference_rate: float

    def to_json_dict(self) -> dict:
        return {
            "n": len(self.items),
            "flip_rate": self.flip_rate,
            "match_target_rate": self.match_target_rate,
            "swap_interference_rate": self.swap_interference_rate,
            "items": [asdict(i) for i in self.items],
        }


def swapped_prompt(triple: MixtureTriple, seed: int, index: int) -> Waveform:
    """A fresh prompt rendered from the interferer's identity."""
    rng = stream(seed, "swap-prompt", index)
    content_seed = int(rng.integers(2 ** 31))
    gain = float(rng.uniform(_GAIN_LO, _GAIN_HI))
    sr = triple.prompt.sample_rate_hz
    unit = synthesize(triple.interference_identity, len(triple.prompt) / sr,
                      sample_rate_hz=sr, seed=content_seed)
    return Waveform(gain * unit.samples, sr)


def _nearer(out: Waveform, ref_target: Waveform, ref_interf: Waveform):
    dt, _ = _aligned_distance(out, ref_target)
    di, _ = _aligned_distance(out, ref_interf)
    return ("target" if dt < di else "interference"), dt, di


def prompt_relevance(store, model_config: ModelConfig, codec, triples: list, *,
                     sampling: Sampling = GREEDY, seed: int = 0,
                     attention_mode: str = CAUSAL,
                     max_new_frames: int | None = None,
                     match_outputs: list | None = None) -> PromptSwapReport:
    """Does swapping the prompt to the interferer identity flip the output?

    An item counts as flipped only when the matched-prompt output is nearer
    the target reference AND the swapped-prompt output is nearer the
    interference reference (the direction the prompts demand).
    """
    if not triples:
        raise ValidationError("empty evaluation set")
    if match_outputs is None:
        match_outputs = [r.waveform for r in run_separations(
            store, model_config, codec, triples, sampling=sampling, seed=seed,
            attention_mode=attention_mode, max_new_frames=max_new_frames)]
    if len(match_outputs) != len(triples):
        raise ValidationError("one matched output per triple required")
    swaps = [swapped_prompt(t, seed, i) for i, t in enumerate(triples)]
    swap_outputs = [r.waveform for r in run_separations(
        store, model_config, codec, triples, sampling=sampling, seed=seed,
        attention_mode=attention_mode, max_new_frames=max_new_frames,
        prompts=swaps)]

    items = []
    for i, t in enumerate(triples):
        ref_target = codec_reference(codec, t.target)
        ref_interf = codec_reference(codec, t.interference)
        m_near, m_dt, m_di = _nearer(match_outputs[i], ref_target, ref_interf)
        s_near, s_dt, s_di = _nearer(swap_outputs[i], ref_target, ref_interf)
        items.append(PromptSwapItem(
            index=i, match_nearer=m_near, swap_nearer=s_near,
            flipped=(m_near == "target" and s_near == "interference"),
            match_target_distance=m_dt, match_interference_distance=m_di,
            swap_target_distance=s_dt, swap_interference_distance=s_di))
    return PromptSwapReport(
        items=tuple(items),
        flip_rate=float(np.mean([i.flipped for i in items])),
        match_target_rate=float(np.mean(
            [i.match_nearer == "target" for i in items])),
        swap_interference_rate=float(np.mean(
            [i.swap_nearer == "interference" for i in items])))
