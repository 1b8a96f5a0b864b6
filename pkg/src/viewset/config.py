"""Flat ``key=value`` run configuration covering every module's settings."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .encoder import EncoderConfig
from .errors import ConfigError
from .head import HeadConfig
from .initializer import InitializerConfig
from .training import ScheduleConfig, TrainConfig


@dataclass
class RunConfig:
    seed: int = 0
    dataset: str = "data/dataset.txt"
    split_file: str = "data/split.txt"
    out_dir: str = "runs/default"
    # classification target: "label" (category) or "sublabel" (subcategory)
    target: str = "label"

    init_kind: str = "precomputed"
    view_dim: int = 512
    # 0: take the width from the dataset
    feature_dim: int = 0
    image_channels: int = 3
    image_height: int = 224
    image_width: int = 224

    num_blocks: int = 4
    num_heads: int = 8
    mlp_ratio: int = 2
    dropout: float = 0.1
    use_position_encoding: bool = False
    use_class_token: bool = False
    # 0: sqrt(view_dim / num_heads)
    temperature: float = 0.0
    max_views: int = 20
    ln_eps: float = 1e-5

    transition: str = "concat_max_mean"
    decoder_hidden: str = "512"
    label_smoothing: float = 0.1
    # 0: number of distinct targets in the dataset
    num_classes: int = 0

    peak_lr: float = 1e-3
    interval_epochs: float = 100
    warmup_epochs: float = 5
    peak_decay: float = 0.4
    epochs: int = 300

    stage1_epochs: int = 30
    stage1_lr: float = 0.01
    stage1_momentum: float = 0.9
    batch_size: int = 1
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.05
    # 0: feed every view
    views_per_shape: int = 0
    freeze_initializer: bool = False

    top_n: int = 1000

    def set(self, key: str, raw: str) -> None:
        types = {f.name: f.type for f in fields(self)}
        if key not in types:
            raise ConfigError(f"unknown config key {key!r}")
        kind = types[key]
        try:
            if kind in (bool, "bool"):
                low = raw.strip().lower()
                if low not in ("true", "false", "1", "0", "yes", "no", "on", "off"):
                    raise ValueError(raw)
                value = low in ("true", "1", "yes", "on")
            elif kind in (int, "int"):
                value = int(raw)
            elif kind in (float, "float"):
                value = float(raw)
            else:
                value = raw.strip()
        except ValueError:
            raise ConfigError(f"bad value for {key}: {raw!r}") from None
        setattr(self, key, value)

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        cfg = cls()
        for n, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"config line {n}: expected key=value, got {line!r}")
            key, value = line.split("=", 1)
            cfg.set(key.strip(), value)
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        return cls.from_text(Path(path).read_text())

    def to_text(self) -> str:
        return "".join(f"{k}={str(v).lower() if isinstance(v, bool) else v}\n" for k, v in dataclasses.asdict(self).items())

    def init_config(self, feature_dim: int) -> InitializerConfig:
        return InitializerConfig(self.init_kind, self.view_dim, self.feature_dim or feature_dim,
                                 (self.image_channels, self.image_height, self.image_width))

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(self.num_blocks, self.num_heads, self.view_dim, self.mlp_ratio, self.dropout,
                             self.use_position_encoding, self.use_class_token, self.temperature or None,
                             self.max_views, self.ln_eps)

    def head_config(self, num_classes: int) -> HeadConfig:
        try:
            hidden = tuple(int(w) for w in self.decoder_hidden.split(",") if w.strip())
        except ValueError:
            raise ConfigError(f"decoder_hidden must be comma-separated ints, got {self.decoder_hidden!r}") from None
        return HeadConfig(self.num_classes or num_classes, self.transition, hidden, self.label_smoothing)

    def train_config(self) -> TrainConfig:
        sched = ScheduleConfig(self.peak_lr, self.interval_epochs, self.warmup_epochs, self.peak_decay, self.epochs)
        return TrainConfig(self.stage1_epochs, self.stage1_lr, self.stage1_momentum, self.batch_size, self.beta1,
                           self.beta2, self.adam_eps, self.weight_decay, self.views_per_shape or None,
                           self.freeze_initializer, sched)

    def validate(self) -> None:
        if self.target not in ("label", "sublabel"):
            raise ConfigError(f"target must be 'label' or 'sublabel', got {self.target!r}")
        self.encoder_config().validate()
        self.head_config(max(self.num_classes, 2)).validate()
        self.train_config().schedule.validate()
        self.init_config(max(self.feature_dim, 1)).validate()
        if self.batch_size < 1 or self.epochs < 1 or self.stage1_epochs < 0 or self.top_n < 1:
            raise ConfigError("batch_size, epochs and top_n must be >= 1, stage1_epochs >= 0")
