"""One TOML file driving every pipeline stage.

Sections [codec], [model], [train], [data], [sampling], [eval]; every key
has a default, unknown sections or keys are hard errors, and the parsed
config reserializes to a canonical text whose hash is embedded in produced
artifacts.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

from .codec import CodecConfig
from .config import canonical_toml, config_hash, parse_toml, read_toml
from .errors import ValidationError
from .model.core import ModelConfig
from .model.infer import Sampling
from .pipeline import DataConfig, TrainConfig


@dataclass(frozen=True)
class SamplingConfig:
    kind: str = "top_k"
    top_k: int = 30
    temperature: float = 0.8
    max_new_frames: int = 0  # 0 = generate up to the model context
    seed: int = 0

    def __post_init__(self):
        self.sampling()  # validates kind, top_k, temperature
        if self.max_new_frames < 0:
            raise ValidationError("sampling config: max_new_frames must be >= 0")
        if self.seed < 0:
            raise ValidationError("sampling config: seed must be >= 0")

    def sampling(self) -> Sampling:
        return Sampling(kind=self.kind, top_k=self.top_k,
                        temperature=self.temperature)

    @property
    def frame_cap(self) -> int | None:
        return self.max_new_frames if self.max_new_frames > 0 else None

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "SamplingConfig":
        _reject_unknown(cls, d, "sampling")
        return cls(**d)


@dataclass(frozen=True)
class EvalConfig:
    seed: int = 0
    max_items: int = 0  # 0 = every item in the manifest
    prompt_swap: bool = False

    def __post_init__(self):
        if self.seed < 0 or self.max_items < 0:
            raise ValidationError("eval config: seed and max_items must be >= 0")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "EvalConfig":
        _reject_unknown(cls, d, "eval")
        return cls(**d)


def _reject_unknown(cls, d: dict, section: str) -> None:
    unknown = set(d) - {f.name for f in fields(cls)}
    if unknown:
        raise ValidationError(
            f"unknown {section} config keys: {sorted(unknown)}")


_SECTIONS = {
    "codec": CodecConfig,
    "model": ModelConfig,
    "train": TrainConfig,
    "data": DataConfig,
    "sampling": SamplingConfig,
    "eval": EvalConfig,
}


@dataclass(frozen=True)
class RunConfig:
    codec: CodecConfig
    model: ModelConfig
    train: TrainConfig
    data: DataConfig
    sampling: SamplingConfig
    eval: EvalConfig

    def __post_init__(self):
        if self.codec.sample_rate_hz != self.data.sample_rate_hz:
            raise ValidationError(
                f"codec sample rate {self.codec.sample_rate_hz} != data "
                f"sample rate {self.data.sample_rate_hz}")
        if self.codec.frame_hop_samples != self.data.frame_hop_samples:
            raise ValidationError(
                f"codec frame hop {self.codec.frame_hop_samples} != data "
                f"frame hop {self.data.frame_hop_samples}")
        if (self.model.n_q != self.codec.n_q
                or self.model.codebook_size != self.codec.codebook_size):
            raise ValidationError(
                f"model vocabulary {self.model.n_q}x{self.model.codebook_size} "
                f"does not match codec {self.codec.n_q}x{self.codec.codebook_size}")

    @classmethod
    def defaults(cls) -> "RunConfig":
        return cls.from_sections({})

    @classmethod
    def from_sections(cls, sections: dict) -> "RunConfig":
        unknown = set(sections) - set(_SECTIONS)
        if unknown:
            raise ValidationError(f"unknown config sections: {sorted(unknown)}")
        parts = {}
        for name, section_cls in _SECTIONS.items():
            body = sections.get(name, {})
            if not isinstance(body, dict):
                raise ValidationError(f"config section [{name}] must be a table")
            parts[name] = section_cls.from_dict(body)
        return cls(**parts)

    def to_sections(self) -> dict:
        return {name: getattr(self, name).to_dict() for name in _SECTIONS}

    def canonical(self) -> str:
        return canonical_toml(self.to_sections())

    def hash(self) -> str:
        return config_hash(self.to_sections())


def load_runconfig(path: str | Path) -> RunConfig:
    return RunConfig.from_sections(read_toml(path))


def parse_runconfig(text: str) -> RunConfig:
    return RunConfig.from_sections(parse_toml(text))
