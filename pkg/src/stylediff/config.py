"""Run configuration: one document covering every subsystem.

YAML in, validated dataclasses out; unknown keys are rejected rather than
ignored so typos fail loudly. Every command echoes its resolved configuration
next to its outputs.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .denoiser import DenoiserConfig
from .encoders import EncoderConfig
from .errors import ConfigError
from .guidance import DropoutConfig, GuidanceWeights
from .sampler import SamplerConfig
from .schedule import NoiseSchedule, make_schedule


@dataclass(frozen=True)
class ScheduleSettings:
    timesteps: int = 200
    beta_start: float = 1e-4
    beta_end: float = 0.1
    kind: str = "linear"

    def build(self) -> NoiseSchedule:
        return make_schedule(self.kind, self.timesteps, self.beta_start, self.beta_end)


@dataclass(frozen=True)
class GuidanceSettings:
    style_scale: float = 1.2
    text_scale: float = 1.0
    order: str = "style_first"
    keep_text: float = 0.8
    keep_style: float = 0.8

    def weights(self) -> GuidanceWeights:
        return GuidanceWeights(self.style_scale, self.text_scale, self.order)

    def dropout(self) -> DropoutConfig:
        return DropoutConfig(self.keep_text, self.keep_style)


@dataclass(frozen=True)
class DataSettings:
    n_train: int = 2000
    n_test: int = 256
    image_size: int = 16
    patch_size: int = 8


@dataclass(frozen=True)
class TrainSettings:
    backbone_lr: float = 2e-4
    style_lr: float = 1e-3
    backbone_batch: int = 8
    style_batch: int = 16
    backbone_iters: int = 5000
    style_iters: int = 2000
    weight_decay: float = 0.0
    lambda_simple: float = 1.0
    lambda_perceptual: float = 0.001
    extractor_seed: int = 0


@dataclass(frozen=True)
class EvalSettings:
    n_images: int = 256
    scorer_iters: int = 300
    scorer_batch: int = 32
    ablation_images: int = 16
    ablation_steps: int = 10


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    schedule: ScheduleSettings = field(default_factory=ScheduleSettings)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    guidance: GuidanceSettings = field(default_factory=GuidanceSettings)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    data: DataSettings = field(default_factory=DataSettings)
    train: TrainSettings = field(default_factory=TrainSettings)
    eval: EvalSettings = field(default_factory=EvalSettings)

    def __post_init__(self):
        if self.encoder.patch_size != self.data.patch_size:
            raise ConfigError(
                f"encoder patch size {self.encoder.patch_size} != data patch size {self.data.patch_size}"
            )
        if self.denoiser.image_size != self.data.image_size:
            raise ConfigError(
                f"denoiser image size {self.denoiser.image_size} != data image size {self.data.image_size}"
            )
        if self.denoiser.cond_width != self.encoder.width:
            raise ConfigError(
                f"denoiser conditioning width {self.denoiser.cond_width} != encoder width {self.encoder.width}"
            )
        if self.sampler.steps > self.schedule.timesteps:
            raise ConfigError(
                f"sampler steps {self.sampler.steps} exceed schedule T={self.schedule.timesteps}"
            )


_SECTIONS = {
    "schedule": ScheduleSettings,
    "encoder": EncoderConfig,
    "denoiser": DenoiserConfig,
    "guidance": GuidanceSettings,
    "sampler": SamplerConfig,
    "data": DataSettings,
    "train": TrainSettings,
    "eval": EvalSettings,
}

_TUPLE_FIELDS = {"channel_mults", "attn_levels"}


def _build_section(cls, data: dict, section: str):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown key(s) in [{section}]: {sorted(unknown)}")
    coerced = {
        k: tuple(v) if k in _TUPLE_FIELDS and isinstance(v, list) else v
        for k, v in data.items()
    }
    return cls(**coerced)


def config_from_dict(doc: dict) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("configuration document must be a mapping")
    unknown = set(doc) - set(_SECTIONS) - {"seed"}
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {sorted(unknown)}")
    kwargs = {"seed": int(doc.get("seed", 0))}
    for section, cls in _SECTIONS.items():
        payload = doc.get(section, {})
        if not isinstance(payload, dict):
            raise ConfigError(f"section [{section}] must be a mapping")
        kwargs[section] = _build_section(cls, payload, section)
    return RunConfig(**kwargs)


def config_to_dict(cfg: RunConfig) -> dict:
    doc = {"seed": cfg.seed}
    for section in _SECTIONS:
        payload = dataclasses.asdict(getattr(cfg, section))
        doc[section] = {
            k: list(v) if isinstance(v, tuple) else v for k, v in payload.items()
        }
    return doc


def load_config(path) -> RunConfig:
    try:
        doc = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    return config_from_dict(doc or {})


def save_config(cfg: RunConfig, path):
    Path(path).write_text(yaml.safe_dump(config_to_dict(cfg), sort_keys=True))


def desk_config(**overrides) -> RunConfig:
    """The fast-training profile every command defaults to."""
    base = config_to_dict(RunConfig())
    for key, value in overrides.items():
        section, _, leaf = key.partition(".")
        if leaf:
            base[section][leaf] = value
        else:
            base[key] = value
    return config_from_dict(base)


def full_scale_config() -> RunConfig:
    """Full-scale profile: the dimensions and rates the desk profile scales down."""
    return config_from_dict(
        {
            "schedule": {"timesteps": 1000, "beta_start": 1e-4, "beta_end": 0.02},
            "encoder": {"text_len": 128, "width": 512, "patch_size": 32, "patch_stride": 4},
            "denoiser": {
                "image_size": 64,
                "base_width": 96,
                "channel_mults": [1, 2, 3],
                "cond_width": 512,
            },
            "sampler": {"steps": 100},
            "data": {"image_size": 64, "patch_size": 32, "n_train": 15300, "n_test": 1700},
            "train": {
                "backbone_lr": 1e-4,
                "style_lr": 1e-5,
                "backbone_batch": 8,
                "style_batch": 16,
                "backbone_iters": 235_000,
                "style_iters": 50_000,
            },
        }
    )
