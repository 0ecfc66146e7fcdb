"""Run configuration: one YAML file with a section per concern, plus dotted overrides.

Precedence, highest first: command-line flags, ``--set section.key=value``
overrides, the config file, built-in defaults. Unknown sections or keys are
rejected.
"""

from __future__ import annotations

import dataclasses
import os
import typing
from dataclasses import asdict, dataclass, field
from pathlib import Path

import yaml

from .autoencoder import EncoderConfig, RendererConfig
from .denoiser import DenoiserConfig
from .flowmatch import TimestepShiftConfig
from .guidance import DistillConfig, TeacherConfig
from .training import TrainConfig

OUTPUT_DIR_ENV = "NIFDIFF_OUTPUT_DIR"
CONFIG_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    dataset: str = "synthetic"  # "synthetic" or a directory of images
    num_images: int = 8
    resolution: int = 32
    seed: int = 0
    max_shapes: int = 2
    input_size: int = 16  # encoder input H0 = W0 (also the latent resolution)
    stats_subsample: int = 0  # 0 uses every image

    def __post_init__(self):
        if self.num_images < 1 or self.input_size < 1 or self.resolution < 1:
            raise ValueError("data sizes must be positive")


@dataclass
class TextConfig:
    backend: str = "stub"
    seed: int = 0


@dataclass
class GenerateConfig:
    prompt: str = "a red circle on a blue background"
    height: int = 64
    width: int = 64
    seed: int = 0
    steps: int = 25
    cfg_scale: float = 4.0


@dataclass
class BenchConfig:
    sizes: list = field(default_factory=lambda: [[16, 16], [32, 32], [64, 64]])
    repeats: int = 5
    warmup: int = 1
    prompt: str = "a red circle on a blue background"
    seed: int = 0
    steps: int = 25
    cfg_scale: float = 4.0


def _toy_stage1() -> TrainConfig:
    return TrainConfig(stage=1, steps=1000, batch_size=2, lr=2e-4)


def _toy_stage2() -> TrainConfig:
    return TrainConfig(stage=2, steps=1000, batch_size=1, lr=5e-4, ema_decay=0.999)


def _toy_denoiser() -> DenoiserConfig:
    return DenoiserConfig(hidden_dim=256, num_blocks=4, num_heads=4, patch_size=2, bottleneck_dim=256, repa_block_index=2)


@dataclass
class RunConfig:
    """Defaults are the desk-scale toy configuration used by the tests."""

    output_dir: str = ""
    data: DataConfig = field(default_factory=DataConfig)
    encoder: EncoderConfig = field(default_factory=lambda: EncoderConfig(latent_channels=16, num_blocks=4))
    renderer: RendererConfig = field(default_factory=lambda: RendererConfig(hidden_dim=64, num_blocks=2))
    teacher: TeacherConfig = field(default_factory=TeacherConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)
    stage1: TrainConfig = field(default_factory=_toy_stage1)
    stage2: TrainConfig = field(default_factory=_toy_stage2)
    denoiser: DenoiserConfig = field(default_factory=_toy_denoiser)
    shift: TimestepShiftConfig = field(default_factory=TimestepShiftConfig)
    text: TextConfig = field(default_factory=TextConfig)
    generate: GenerateConfig = field(default_factory=GenerateConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)

    def resolved_output_dir(self) -> Path:
        return Path(self.output_dir or os.environ.get(OUTPUT_DIR_ENV) or "runs")

    def to_dict(self) -> dict:
        out = asdict(self)
        out["config_version"] = CONFIG_VERSION
        return out

    def check(self) -> None:
        """Cross-section consistency that single dataclasses cannot see."""
        if self.stage1.stage != 1 or self.stage2.stage != 2:
            raise ConfigError("stage1.stage must be 1 and stage2.stage must be 2")
        if self.denoiser.latent_channels != self.encoder.latent_channels:
            raise ConfigError("denoiser.latent_channels must equal encoder.latent_channels")
        if self.denoiser.repa_dim != self.teacher.feature_dim:
            raise ConfigError("denoiser.repa_dim must equal teacher.feature_dim")
        if self.data.input_size % self.denoiser.patch_size:
            raise ConfigError("data.input_size must be divisible by denoiser.patch_size")
        if self.distill.w_base != self.stage1.w_base:
            raise ConfigError("distill.w_base and stage1.w_base disagree; set one of them")


def _coerce(cls, values: dict) -> dict:
    """YAML 1.1 reads ``1e-4`` as a string; convert numeric strings for float fields."""
    hints = typing.get_type_hints(cls)
    out = dict(values)
    for k, v in values.items():
        if hints.get(k) is float and isinstance(v, (str, int)) and not isinstance(v, bool):
            out[k] = float(v)
    return out


def _build(cls, values, where: str):
    if not isinstance(values, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(values).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {unknown}")
    try:
        return cls(**_coerce(cls, values))
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where}: {e}") from e


def from_dict(raw: dict | None) -> RunConfig:
    raw = dict(raw or {})
    version = raw.pop("config_version", CONFIG_VERSION)
    if version != CONFIG_VERSION:
        raise ConfigError(f"unsupported config_version {version}")
    base = RunConfig()
    given = {k: v for k, v in raw.items() if isinstance(v, dict)}
    kwargs = {}
    for f in dataclasses.fields(RunConfig):
        if f.name not in raw:
            continue
        value = raw.pop(f.name)
        if f.name == "output_dir":
            kwargs[f.name] = str(value)
            continue
        merged = asdict(getattr(base, f.name))
        if not isinstance(value, dict):
            raise ConfigError(f"{f.name}: expected a mapping")
        unknown = sorted(set(value) - set(merged))
        if unknown:
            raise ConfigError(f"{f.name}: unknown key(s) {unknown}")
        merged.update(value)
        kwargs[f.name] = _build(type(getattr(base, f.name)), merged, f.name)
    if raw:
        raise ConfigError(f"unknown section(s) {sorted(raw)}")
    cfg = dataclasses.replace(base, **kwargs)
    # w_base lives in both stage1 and distill; whichever section sets it wins, stage1 on a tie.
    if "w_base" in given.get("stage1", {}):
        cfg.distill = dataclasses.replace(cfg.distill, w_base=cfg.stage1.w_base)
    elif "w_base" in given.get("distill", {}):
        cfg.stage1 = dataclasses.replace(cfg.stage1, w_base=cfg.distill.w_base)
    cfg.check()
    return cfg


def load_config(path=None, overrides: list[str] | None = None) -> RunConfig:
    raw = {}
    if path is not None:
        try:
            with open(path) as f:
                raw = yaml.safe_load(f) or {}
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        except yaml.YAMLError as e:
            raise ConfigError(f"{path}: invalid YAML: {e}") from e
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
    for item in overrides or []:
        apply_override(raw, item)
    return from_dict(raw)


def apply_override(raw: dict, item: str) -> None:
    """``section.key=value`` with ``value`` parsed as YAML (so ``3``, ``1e-4``, ``[1, 2]`` work)."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form section.key=value")
    key, value = item.split("=", 1)
    parts = key.strip().split(".")
    node = raw
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override {item!r}: {p} is not a section")
    try:
        node[parts[-1]] = yaml.safe_load(value)
    except yaml.YAMLError as e:
        raise ConfigError(f"override {item!r}: {e}") from e
