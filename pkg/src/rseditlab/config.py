"""Run configuration: one validated, serializable object per experiment.

A RunConfig pins everything that determines run outputs (architecture,
layout, schedule, guidance defaults, optimizer, corpus recipe, codec
constants, seed), so (config, seed) fully determines corpus bytes, loss
logs, checkpoints, samples and reports.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .codec import CodecConfig
from .conditioning import ConditioningLayout
from .corpus import CorpusConfig, VOCABULARY
from .denoisers import BlockConfig
from .diffusion import GuidanceConfig
from .errors import ConfigurationError

CONFIG_FILENAME = "config.json"


@dataclass
class OptimizerConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class ScheduleConfig:
    steps: int = 100
    beta_start: float = 1e-3
    beta_end: float = 0.2


@dataclass
class RunConfig:
    layout: str = "unet_channel"
    block: BlockConfig = field(default_factory=BlockConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    seed: int = 0
    train_steps: int = 2000
    batch_size: int = 16
    checkpoint_every: int = 500
    codec_spatial_factor: int = 2
    codec_channel_mean: list | None = None
    codec_channel_std: list | None = None

    # -- derived -------------------------------------------------------------

    @property
    def layout_kind(self) -> ConditioningLayout:
        return ConditioningLayout.parse(self.layout)

    @property
    def backbone(self) -> str:
        return self.layout_kind.backbone

    @property
    def latent_shape(self) -> tuple[int, int, int]:
        f = self.codec_spatial_factor
        side = self.corpus.image_size // f
        return (3 * f * f, side, side)

    @property
    def vocab_size(self) -> int:
        return len(VOCABULARY)

    def codec_config(self) -> CodecConfig:
        if self.codec_channel_mean is None or self.codec_channel_std is None:
            raise ConfigurationError(
                "codec constants not set; train derives them from the corpus")
        return CodecConfig(spatial_factor=self.codec_spatial_factor,
                           channel_mean=np.asarray(self.codec_channel_mean),
                           channel_std=np.asarray(self.codec_channel_std))

    def set_codec(self, codec: CodecConfig) -> None:
        self.codec_spatial_factor = codec.spatial_factor
        self.codec_channel_mean = [float(v) for v in codec.channel_mean]
        self.codec_channel_std = [float(v) for v in codec.channel_std]

    # -- validation ------------------------------------------------------------

    def validate(self) -> None:
        ConditioningLayout.parse(self.layout)
        self.block.validate()
        self.corpus.validate()
        if self.schedule.steps < 1:
            raise ConfigurationError("schedule must have at least one step")
        if not (0 < self.schedule.beta_start < self.schedule.beta_end < 1):
            raise ConfigurationError(
                f"schedule betas invalid: [{self.schedule.beta_start}, "
                f"{self.schedule.beta_end}]")
        self.guidance.validate(self.schedule.steps)
        if self.batch_size < 1 or self.train_steps < 1 or self.checkpoint_every < 1:
            raise ConfigurationError("batch/steps/checkpoint_every must be >= 1")
        if self.optimizer.lr <= 0:
            raise ConfigurationError("learning rate must be positive")
        if self.corpus.image_size % self.codec_spatial_factor:
            raise ConfigurationError(
                f"codec factor {self.codec_spatial_factor} does not divide "
                f"image size {self.corpus.image_size}")
        if self.batch_size > self.corpus.train_samples:
            raise ConfigurationError(
                "batch size exceeds the training corpus size")
        c, h, w = self.latent_shape
        p = self.block.patch_size
        if h % p or w % p:
            raise ConfigurationError(
                f"patch size {p} does not divide latent grid {h}x{w}")

    # -- serialization ---------------------------------------------------------

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @staticmethod
    def from_dict(data: dict) -> "RunConfig":
        data = dict(data)
        nested = {"block": BlockConfig, "schedule": ScheduleConfig,
                  "guidance": GuidanceConfig, "optimizer": OptimizerConfig,
                  "corpus": CorpusConfig}
        kwargs = {}
        known = {f.name for f in dataclasses.fields(RunConfig)}
        unknown = set(data) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        for name, value in data.items():
            if name in nested and isinstance(value, dict):
                cls = nested[name]
                extra = set(value) - {f.name for f in dataclasses.fields(cls)}
                if extra:
                    raise ConfigurationError(
                        f"unknown keys in {name}: {sorted(extra)}")
                kwargs[name] = cls(**value)
            else:
                kwargs[name] = value
        cfg = RunConfig(**kwargs)
        cfg.validate()
        return cfg

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    @staticmethod
    def from_json(text: str) -> "RunConfig":
        return RunConfig.from_dict(json.loads(text))

    def digest(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True,
                               separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]


def write_config(cfg: RunConfig, run_dir) -> Path:
    path = Path(run_dir) / CONFIG_FILENAME
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(cfg.to_json())
    return path


def read_config(path) -> RunConfig:
    path = Path(path)
    if path.is_dir():
        path = path / CONFIG_FILENAME
    return RunConfig.from_json(path.read_text())
