"""Pipeline configuration: dataclasses plus a sectioned key-value file format.

Every knob of the end-to-end run lives here, under one global seed from
which all stage seeds are derived. Config files are INI-style sections
of key = value lines; unknown keys are rejected with the list of valid
ones, and out-of-range values are rejected with the violated constraint.
"""

from __future__ import annotations

import configparser
import hashlib
import io
from dataclasses import dataclass, field, fields

import numpy as np

from .nncore import ModelSpec, TrainConfig
from .webdata import NoiseModel


class ConfigError(ValueError):
    """Invalid configuration file or value."""


def _require(cond, message):
    if not cond:
        raise ConfigError(message)


@dataclass
class DataConfig:
    num_categories: int = 8
    image_size: int = 32
    loc_image_size: int = 64
    easy_per_class: int = 80
    hard_per_class: int = 90
    test_per_class: int = 40
    loc_easy_per_class: int = 10
    loc_hard_per_class: int = 25
    flip_rate: float = 0.3
    similarity_bias: float = 0.8
    junk_rate: float = 0.12

    def __post_init__(self):
        _require(2 <= self.num_categories <= 16,
                 "data.num_categories must be in [2, 16]")
        for name in ("image_size", "loc_image_size"):
            _require(getattr(self, name) >= 16, f"data.{name} must be >= 16")
        for name in ("easy_per_class", "hard_per_class", "test_per_class",
                     "loc_easy_per_class", "loc_hard_per_class"):
            _require(getattr(self, name) >= 1, f"data.{name} must be >= 1")
        _require(0.0 <= self.flip_rate < 1.0, "data.flip_rate must be in [0, 1)")
        _require(0.0 <= self.similarity_bias <= 1.0,
                 "data.similarity_bias must be in [0, 1]")
        _require(0.0 <= self.junk_rate < 1.0, "data.junk_rate must be in [0, 1)")
        _require(self.flip_rate + self.junk_rate < 1.0,
                 "data.flip_rate + data.junk_rate must be < 1")

    def noise_model(self):
        return NoiseModel(self.flip_rate, self.similarity_bias, self.junk_rate)


@dataclass
class ModelConfig:
    conv_channels: tuple = (16, 32, 64)
    kernel_size: int = 3
    stride: int = 1
    pool: int = 2
    embed_dim: int = 64

    def __post_init__(self):
        _require(all(c >= 1 for c in self.conv_channels),
                 "model.conv_channels must be positive")
        _require(self.kernel_size >= 1, "model.kernel_size must be >= 1")
        _require(self.stride >= 1, "model.stride must be >= 1")
        _require(self.pool >= 1, "model.pool must be >= 1")
        _require(self.embed_dim >= 1, "model.embed_dim must be >= 1")

    def to_spec(self, num_classes, image_size):
        convs = tuple((c, self.kernel_size, self.stride)
                      for c in self.conv_channels)
        return ModelSpec(conv_layers=convs, pool=self.pool,
                         embed_dim=self.embed_dim, num_classes=num_classes,
                         in_channels=3, input_size=image_size)


@dataclass
class StageConfig:
    batch_size: int = 64
    base_lr: float = 0.01
    lr_decay_factor: float = 0.1
    lr_step: int = 0  # 0 derives total_iters // 3
    momentum: float = 0.9
    total_iters: int = 400

    def __post_init__(self):
        _require(self.batch_size >= 1, "batch_size must be >= 1")
        _require(self.base_lr > 0, "base_lr must be positive")
        _require(0.0 < self.lr_decay_factor < 1.0,
                 "lr_decay_factor must be in (0, 1)")
        _require(self.lr_step >= 0, "lr_step must be >= 0")
        _require(0.0 <= self.momentum < 1.0, "momentum must be in [0, 1)")
        _require(self.total_iters >= 0, "total_iters must be >= 0")

    def to_train_config(self, seed):
        step = self.lr_step or max(1, self.total_iters // 3)
        return TrainConfig(batch_size=self.batch_size, base_lr=self.base_lr,
                           lr_decay_factor=self.lr_decay_factor, lr_step=step,
                           momentum=self.momentum, total_iters=self.total_iters,
                           seed=seed)


@dataclass
class GraphConfig:
    top_k: int = 5

    def __post_init__(self):
        _require(self.top_k >= 1, "graph.top_k must be >= 1")


@dataclass
class LocalizeConfig:
    knn_k: int = 10
    affinity_tau: float = 0.5
    min_members: int = 3
    density_percentile: float = 10.0
    max_proposals: int = 30
    shrinkage: float = 0.0  # 0 derives 0.1 * trace(sigma) / dim

    def __post_init__(self):
        _require(self.knn_k >= 1, "localize.knn_k must be >= 1")
        _require(-1.0 <= self.affinity_tau <= 1.0,
                 "localize.affinity_tau must be in [-1, 1]")
        _require(self.min_members >= 1, "localize.min_members must be >= 1")
        _require(0.0 <= self.density_percentile <= 100.0,
                 "localize.density_percentile must be in [0, 100]")
        _require(self.max_proposals >= 1, "localize.max_proposals must be >= 1")
        _require(self.shrinkage >= 0.0, "localize.shrinkage must be >= 0")


@dataclass
class DetectConfig:
    svm_c: float = 1.0
    svm_epochs: int = 40
    neg_per_pos: int = 10
    nms_iou: float = 0.3
    eval_iou: float = 0.5
    augment_iou: float = 0.5
    use_augmentation: bool = False
    whitelist: str = ""  # relatedness file enabling category expansion

    def __post_init__(self):
        _require(self.svm_c > 0, "detect.svm_c must be positive")
        _require(self.svm_epochs >= 1, "detect.svm_epochs must be >= 1")
        _require(self.neg_per_pos >= 1, "detect.neg_per_pos must be >= 1")
        _require(0.0 <= self.nms_iou <= 1.0, "detect.nms_iou must be in [0, 1]")
        _require(0.0 < self.eval_iou <= 1.0, "detect.eval_iou must be in (0, 1]")
        _require(0.0 < self.augment_iou <= 1.0,
                 "detect.augment_iou must be in (0, 1]")


@dataclass
class PipelineConfig:
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    stage1: StageConfig = field(default_factory=StageConfig)
    stage2: StageConfig = field(default_factory=lambda: StageConfig(total_iters=500))
    graph: GraphConfig = field(default_factory=GraphConfig)
    localize: LocalizeConfig = field(default_factory=LocalizeConfig)
    detect: DetectConfig = field(default_factory=DetectConfig)

    def __post_init__(self):
        _require(self.seed >= 0, "pipeline.seed must be >= 0")

    def stage_seed(self, stage):
        return derive_seed(self.seed, stage)

    def model_spec(self):
        return self.model.to_spec(self.data.num_categories,
                                  self.data.image_size)


def derive_seed(global_seed, stage):
    """Stable 63-bit sub-seed from the global seed and a stage name."""
    digest = hashlib.sha256(f"{global_seed}:{stage}".encode()).digest()
    return int.from_bytes(digest[:8], "little") & (2 ** 63 - 1)


_SECTIONS = {
    "pipeline": None,  # scalar fields of PipelineConfig itself
    "data": DataConfig,
    "model": ModelConfig,
    "stage1": StageConfig,
    "stage2": StageConfig,
    "graph": GraphConfig,
    "localize": LocalizeConfig,
    "detect": DetectConfig,
}


def _format_value(value):
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_value(text, ftype, key):
    try:
        if ftype is int:
            return int(text)
        if ftype is float:
            return float(text)
        if ftype is bool:
            if text.lower() in ("true", "1", "yes"):
                return True
            if text.lower() in ("false", "0", "no"):
                return False
            raise ValueError(text)
        if ftype is tuple:
            return tuple(int(v) for v in text.split(",") if v.strip())
        return text
    except ValueError:
        raise ConfigError(f"cannot parse {key} = {text!r} as {ftype.__name__}") \
            from None


def save_config(cfg, path):
    """Write every field explicitly so files round-trip bit-exactly."""
    parser = configparser.ConfigParser()
    parser["pipeline"] = {"seed": str(cfg.seed)}
    for section, cls in _SECTIONS.items():
        if cls is None:
            continue
        sub = getattr(cfg, section)
        parser[section] = {f.name: _format_value(getattr(sub, f.name))
                           for f in fields(cls)}
    with open(path, "w") as f:
        parser.write(f)


def load_config(path):
    parser = configparser.ConfigParser()
    try:
        with open(path) as f:
            parser.read_file(f)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown section [{section}]; valid sections: "
                              + ", ".join(sorted(_SECTIONS)))
    kwargs = {}
    if parser.has_section("pipeline"):
        for key, text in parser["pipeline"].items():
            if key != "seed":
                raise ConfigError("unknown key 'pipeline." + key
                                  + "'; valid keys: seed")
            kwargs["seed"] = _parse_value(text, int, "pipeline.seed")
    for section, cls in _SECTIONS.items():
        if cls is None or not parser.has_section(section):
            continue
        valid = {f.name: f.type for f in fields(cls)}
        types = {f.name: type(f.default) if f.default is not None else str
                 for f in fields(cls)}
        sub_kwargs = {}
        for key, text in parser[section].items():
            if key not in valid:
                raise ConfigError(f"unknown key '{section}.{key}'; valid keys: "
                                  + ", ".join(sorted(valid)))
            sub_kwargs[key] = _parse_value(text, types[key], f"{section}.{key}")
        kwargs[section] = cls(**sub_kwargs)
    try:
        return PipelineConfig(**kwargs)
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def config_equal(a, b):
    """Field-for-field equality across the nested dataclasses."""
    return a == b
