"""Structured run configuration: one YAML file covering dataset generation,
both training stages, and evaluation. Unknown keys are rejected by name, and a
resolved config re-serializes to itself (round-trip stable).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .checkpoints import canonical_hash
from .generator import GeneratorConfig
from .discriminator import DiscriminatorConfig
from .objectives import LossWeights
from .synth_data import DatasetConfig
from .training import CfTrainConfig, VqaTrainConfig
from .vqa_core import VqaModelConfig


class ConfigError(ValueError):
    """Raised on unknown keys or malformed values in a config file."""


@dataclass
class GeneratorSection:
    base_channels: int = 32
    depth: int = 3
    m: int | None = None


@dataclass
class DiscriminatorSection:
    base_channels: int = 32
    depth: int = 3


@dataclass
class EvalSection:
    attention_threshold: float = 0.5
    panel_opacity: float = 0.6
    panels: int = 16


@dataclass
class StudySection:
    n: int = 10
    seed: int = 0


@dataclass
class Config:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: VqaModelConfig = field(default_factory=VqaModelConfig)
    vqa_train: VqaTrainConfig = field(default_factory=VqaTrainConfig)
    cf_train: CfTrainConfig = field(default_factory=CfTrainConfig)
    generator: GeneratorSection = field(default_factory=GeneratorSection)
    discriminator: DiscriminatorSection = field(default_factory=DiscriminatorSection)
    eval: EvalSection = field(default_factory=EvalSection)
    study: StudySection = field(default_factory=StudySection)

    def generator_config(self) -> GeneratorConfig:
        return GeneratorConfig(
            in_channels=4,
            base_channels=self.generator.base_channels,
            depth=self.generator.depth,
            lang_dim=self.model.q_dim + self.model.fuse_dim,
            m=self.generator.m,
        )

    def discriminator_config(self) -> DiscriminatorConfig:
        return DiscriminatorConfig(
            in_channels=3,
            base_channels=self.discriminator.base_channels,
            depth=self.discriminator.depth,
        )


_SECTION_TYPES = {
    "dataset": DatasetConfig,
    "model": VqaModelConfig,
    "vqa_train": VqaTrainConfig,
    "cf_train": CfTrainConfig,
    "generator": GeneratorSection,
    "discriminator": DiscriminatorSection,
    "eval": EvalSection,
    "study": StudySection,
}


def _build_section(cls, raw: dict, path: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"section '{path}' must be a mapping")
    names = {f.name for f in dataclasses.fields(cls)}
    handled = dict(raw)

    kwargs = {}
    if cls is CfTrainConfig:
        weights = LossWeights(
            lambda_rec=float(handled.pop("lambda_rec", LossWeights.lambda_rec)),
            lambda_adv=float(handled.pop("lambda_adv", LossWeights.lambda_adv)),
            lambda_flip=float(handled.pop("lambda_flip", LossWeights.lambda_flip)),
        )
        kwargs["weights"] = weights
        names.discard("weights")

    unknown = sorted(set(handled) - names)
    if unknown:
        raise ConfigError(f"unknown key(s) in '{path}': {', '.join(unknown)}")

    for key, value in handled.items():
        if cls is DatasetConfig and key == "palette":
            if not isinstance(value, dict):
                raise ConfigError("dataset.palette must map color names to [r, g, b]")
            value = {str(k): tuple(float(x) for x in v) for k, v in value.items()}
        if cls is DatasetConfig and key == "question_types":
            value = tuple(value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"invalid value in section '{path}': {exc}") from exc


def load_config(path: str | Path | None = None) -> Config:
    """Load a YAML config; an empty or missing-section file yields defaults."""
    raw = {}
    if path is not None:
        text = Path(path).read_text()
        raw = yaml.safe_load(text) or {}
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    unknown = sorted(set(raw) - set(_SECTION_TYPES))
    if unknown:
        raise ConfigError(f"unknown top-level section(s): {', '.join(unknown)}")
    sections = {
        name: _build_section(cls, raw.get(name, {}) or {}, name)
        for name, cls in _SECTION_TYPES.items()
    }
    return Config(**sections)


def config_to_dict(config: Config) -> dict:
    """Plain-data form of a resolved config (the shape a YAML file would hold)."""
    out = {}
    for name in _SECTION_TYPES:
        section = dataclasses.asdict(getattr(config, name))
        if name == "cf_train":
            weights = section.pop("weights")
            section.update(weights)
        if name == "dataset":
            section["palette"] = {k: list(v) for k, v in section["palette"].items()}
            section["question_types"] = list(section["question_types"])
        out[name] = section
    return out


def config_hash(config: Config) -> str:
    return canonical_hash(config_to_dict(config))


def save_config(config: Config, path: str | Path) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(config_to_dict(config), fh, sort_keys=True)
