"""Declarative experiment configuration: YAML in, dataclasses out, plus a
stable content hash embedded in every artifact a run emits."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .mcnet import McConfig
from .splittrain import LinkNoiseSpec, OptimizerConfig
from .sscnet import SscConfig

CONFIG_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass
class DatasetConfig:
    path: str | None = None          # existing CAMCDS01 file; otherwise synthesize
    mods: list[str] = field(default_factory=lambda: ["BPSK", "QPSK", "8PSK", "QAM16"])
    n_per_class: int = 1000
    L: int = 128
    sps: int = 4
    snr_db: float = 10.0
    seed: int = 0
    val_fraction: float = 0.2
    eval_n_per_class: int = 250

    def __post_init__(self):
        if not self.mods:
            raise ConfigError("dataset.mods must name at least one modulation")
        if not 0.0 < self.val_fraction < 1.0:
            raise ConfigError("dataset.val_fraction must be in (0, 1)")


@dataclass
class ModelConfig:
    L: int = 128
    N: int = 16
    M: int = 4
    conv1_kernels: int = 64
    conv2_kernels: int = 32
    lstm_units: int = 64
    n_heads: int = 8
    head_dim: int = 16
    dense2: int = 256
    dropout: float = 0.5

    def ssc(self) -> SscConfig:
        return SscConfig(L=self.L, N=self.N, conv1_kernels=self.conv1_kernels,
                         conv2_kernels=self.conv2_kernels, dropout=self.dropout)

    def mc(self) -> McConfig:
        return McConfig(N=self.N, M=self.M, lstm_units=self.lstm_units,
                        n_heads=self.n_heads, head_dim=self.head_dim,
                        dense2=self.dense2, dropout=self.dropout)


@dataclass
class CompressConfig:
    prune_ratios: dict[str, float] = field(default_factory=dict)
    bits: int = 8
    lam: float = 0.1
    fine_tune_epochs: int = 1


@dataclass
class ExperimentConfig:
    version: int = CONFIG_VERSION
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    link: LinkNoiseSpec = field(default_factory=LinkNoiseSpec)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    compress: CompressConfig = field(default_factory=CompressConfig)
    eval_snrs_db: list[float] = field(default_factory=lambda: [-10, -5, 0, 5, 10])
    out_dir: str = "runs/default"

    def __post_init__(self):
        if self.version != CONFIG_VERSION:
            raise ConfigError(f"unsupported config version {self.version}")
        if self.dataset.path is None and self.dataset.L != self.model.L:
            raise ConfigError(
                f"dataset frame length {self.dataset.L} must match model.L {self.model.L}")
        if len(self.dataset.mods) != self.model.M and self.dataset.path is None:
            raise ConfigError(
                f"model.M {self.model.M} must equal the number of modulations "
                f"{len(self.dataset.mods)}")


_SECTION_TYPES = {
    "dataset": DatasetConfig,
    "model": ModelConfig,
    "link": LinkNoiseSpec,
    "optimizer": OptimizerConfig,
    "compress": CompressConfig,
}


def _build(cls, data: dict):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def config_from_dict(raw: dict) -> ExperimentConfig:
    raw = dict(raw or {})
    kwargs = {}
    for key, cls in _SECTION_TYPES.items():
        if key in raw:
            section = raw.pop(key)
            if not isinstance(section, dict):
                raise ConfigError(f"section {key!r} must be a mapping")
            kwargs[key] = _build(cls, section)
    kwargs.update(raw)
    return _build(ExperimentConfig, kwargs)


def load_config(path) -> ExperimentConfig:
    try:
        raw = yaml.safe_load(Path(path).read_text())
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if raw is not None and not isinstance(raw, dict):
        raise ConfigError("config file must contain a mapping")
    return config_from_dict(raw or {})


def config_to_dict(config: ExperimentConfig) -> dict:
    return dataclasses.asdict(config)


def config_hash(config: ExperimentConfig) -> str:
    canon = json.dumps(config_to_dict(config), sort_keys=True, default=str)
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:16]
