"""Run configuration.

Configs are YAML files mirroring the dataclasses below; any field may be
overridden with ``section.field=value`` strings (values parsed as YAML).
Unknown keys are rejected.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import yaml

from .csfm import MoEConfig, MoHConfig
from .errors import ConfigError
from .extractor import ExtractorConfig

OUTPUT_ROOT_ENV = "VARMARK_OUTPUT_ROOT"


@dataclass
class ModelConfig:
    image_size: int = 64
    feature_dim: int = 16
    codebook_size: int = 512
    scales: List[int] = field(default_factory=lambda: [1, 2, 3, 4, 6, 8])
    channels: List[int] = field(default_factory=lambda: [32, 64, 64])
    select_k: int = 4
    # cover-scale indices (0-based) used for every watermark scale instead of adaptive top-k
    fixed_scales: Optional[List[int]] = None
    moh: MoHConfig = field(default_factory=MoHConfig)
    moe: MoEConfig = field(default_factory=MoEConfig)
    attention_residual: bool = True
    faem_shared: bool = True
    extractor: ExtractorConfig = field(default_factory=ExtractorConfig)

    def __post_init__(self):
        if self.image_size % 8:
            raise ConfigError("image_size must be divisible by the encoder stride 8")
        if self.scales[-1] != self.image_size // 8:
            raise ConfigError(f"last scale must equal feature size {self.image_size // 8}")
        if not 1 <= self.select_k <= len(self.scales):
            raise ConfigError(f"select_k must be in [1, {len(self.scales)}]")
        if self.fixed_scales is not None and not all(0 <= s < len(self.scales) for s in self.fixed_scales):
            raise ConfigError(f"fixed_scales out of range: {self.fixed_scales}")


@dataclass
class LossWeights:
    im: float = 1.0
    wm: float = 1.0
    rec: float = 1.0
    perc: float = 0.1
    adv: float = 0.1
    moe: float = 0.02

    def __post_init__(self):
        for f in dataclasses.fields(self):
            if getattr(self, f.name) < 0:
                raise ConfigError(f"loss weight {f.name} must be >= 0")


@dataclass
class TrainSchedule:
    # base: encoder + codebook frozen; finetune: watermark encoder + codebook frozen.
    # Full-scale reference: 256px, 40 epochs, batch 60, lr 1e-4, discriminator at
    # step 10000; finetune at 512/1024px, batch 5, lr 5e-6.
    stage: str = "base"
    steps: int = 1000
    tokenizer_steps: int = 500
    tokenizer_lr: float = 1e-3
    tokenizer_batch_size: Optional[int] = None  # None: same as batch_size
    batch_size: int = 16
    learning_rate: float = 1e-4
    extractor_lr: Optional[float] = None  # None: same as learning_rate
    extractor_warmup_steps: int = 0  # extractor-only steps with the embedder held fixed
    discriminator_start_step: int = 200
    attack_augmentation: bool = False
    augmentation_prob: float = 0.5
    log_every: int = 10
    checkpoint_every: int = 500

    def __post_init__(self):
        if self.stage not in ("base", "finetune"):
            raise ConfigError(f"unknown stage {self.stage!r}")
        # zero is accepted (parameter-freeze diagnostics)
        if self.learning_rate < 0 or self.tokenizer_lr < 0 or (self.extractor_lr or 0) < 0:
            raise ConfigError("learning rates must be >= 0")
        if self.extractor_warmup_steps < 0:
            raise ConfigError("extractor_warmup_steps must be >= 0")
        if self.discriminator_start_step < 0:
            raise ConfigError("discriminator_start_step must be >= 0")


@dataclass
class DataConfig:
    cover_dir: Optional[str] = None
    watermark_dir: Optional[str] = None
    n_train: int = 200
    n_eval: int = 32


@dataclass
class EvalConfig:
    attacks: List[str] = field(
        default_factory=lambda: ["crop", "rotate", "blur", "brightness", "noise", "erase", "jpeg", "composite"]
    )
    n_pairs: int = 32
    batch_size: int = 16
    figures: bool = True


@dataclass
class RunConfig:
    seed: int = 0
    output_dir: Optional[str] = None
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    train: TrainSchedule = field(default_factory=TrainSchedule)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def resolve_output_dir(self) -> Path:
        if self.output_dir:
            return Path(self.output_dir)
        return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _build(cls, data):
    if not dataclasses.is_dataclass(cls):
        return data
    if data is None:
        return cls()
    if isinstance(data, cls):
        return data
    if not isinstance(data, dict):
        raise ConfigError(f"expected a mapping for {cls.__name__}, got {data!r}")
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(names)
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs = {}
    hints = _hints(cls)
    for key, value in data.items():
        if hints.get(key):
            value = _build(hints[key], value)
        elif isinstance(value, str) and names[key].type in (float, "float", Optional[float], "Optional[float]"):
            # YAML 1.1 reads "1e-3" as a string
            try:
                value = float(value)
            except ValueError as exc:
                raise ConfigError(f"{cls.__name__}.{key} must be a number, got {value!r}") from exc
        kwargs[key] = value
    return cls(**kwargs)


def _hints(cls) -> dict:
    sub = {
        RunConfig: {"data": DataConfig, "model": ModelConfig, "loss": LossWeights, "train": TrainSchedule, "eval": EvalConfig},
        ModelConfig: {"moh": MoHConfig, "moe": MoEConfig, "extractor": ExtractorConfig},
    }
    return sub.get(cls, {})


def from_dict(data: dict) -> RunConfig:
    return _build(RunConfig, data)


def apply_overrides(data: dict, overrides: Sequence[str]) -> dict:
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override must look like key.path=value, got {item!r}")
        path, raw = item.split("=", 1)
        keys = path.strip().split(".")
        node = data
        for k in keys[:-1]:
            node = node.setdefault(k, {})
            if not isinstance(node, dict):
                raise ConfigError(f"cannot override inside non-mapping key {k!r}")
        node[keys[-1]] = yaml.safe_load(raw)
    return data


def load_config(path=None, overrides: Sequence[str] = ()) -> RunConfig:
    data = {}
    if path is not None:
        with open(path) as fh:
            data = yaml.safe_load(fh) or {}
    return from_dict(apply_overrides(data, overrides))


def dump_config(cfg: RunConfig, path) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=False)
