"""Pipeline configuration: one TOML (or JSON) file with a few sections."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

from .llm import BackendConfig

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    directory: str | None = None
    train: str | None = None
    valid: str | None = None
    test: str | None = None
    time_format: str = "iso-date"
    ids: bool = False
    allow_empty_split: bool = False
    synthetic: bool = False


@dataclass
class ModelConfig:
    dim: int = 128
    time_dim: int = 32
    layers: int = 3
    budget: int = 32
    top_k: int = 30
    window: int | None = None
    max_fanout: int | None = 64
    max_frontier: int | None = 64
    init_mode: str = "query"
    aggregate: str = "mean"
    strict_loss: bool = False
    heads: int = 1
    transformer_layers: int = 1
    fallback_weight: float = 1.0
    separate_time_encoders: bool = False
    finetune_embeddings: bool = False


@dataclass
class TrainConfig:
    lr: float = 0.001
    batch_size: int = 64
    gnn_epochs: int = 5
    aggregator_epochs: int = 5
    aggregator_lr: float | None = None
    max_train_queries: int | None = None
    directions: str = "both"


@dataclass
class EditorConfig:
    mode: str = "rules"
    raw_times: bool = False
    strict_parse: bool = False
    max_retries: int = 2


@dataclass
class EvalConfig:
    split: str = "test"
    directions: str = "both"
    max_queries: int | None = None
    metrics: str = "both"
    planted_only: bool = False
    corrupt_ratio: float = 0.0


@dataclass
class SynthConfig:
    n_entities: int = 200
    n_relations: int = 8
    horizon: int = 100
    instances_per_step: int = 6
    background_per_step: int = 6
    noise_ratio: float = 0.05
    n_regions: int = 5


@dataclass
class PipelineConfig:
    name: str = "default"
    seed: int = 0
    output_dir: str = "runs"
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    editor: EditorConfig = field(default_factory=EditorConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    gateway: BackendConfig = field(default_factory=BackendConfig)

    @property
    def run_dir(self) -> Path:
        return Path(self.output_dir) / self.name

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


_SECTIONS = {
    "data": DataConfig,
    "model": ModelConfig,
    "train": TrainConfig,
    "editor": EditorConfig,
    "eval": EvalConfig,
    "synth": SynthConfig,
    "gateway": BackendConfig,
}


def _build(cls, values: dict, where: str):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - names
    if unknown:
        raise ConfigError(f"unknown key(s) in [{where}]: {', '.join(sorted(unknown))}")
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{where}]: {exc}") from None


def config_from_dict(raw: dict) -> PipelineConfig:
    top, sections = {}, {}
    for key, value in raw.items():
        if key in _SECTIONS:
            if not isinstance(value, dict):
                raise ConfigError(f"[{key}] must be a table")
            sections[key] = _build(_SECTIONS[key], value, key)
        else:
            top[key] = value
    cfg = _build(PipelineConfig, top, "top level")
    for key, value in sections.items():
        setattr(cfg, key, value)
    _check(cfg)
    return cfg


def _check(cfg: PipelineConfig) -> None:
    m = cfg.model
    if m.layers < 1 or m.budget < 1 or m.top_k < 1:
        raise ConfigError("layers, budget and top_k must be >= 1")
    if m.time_dim > m.dim:
        raise ConfigError("time_dim must not exceed dim")
    if cfg.editor.mode not in ("off", "rules", "llm"):
        raise ConfigError(f"unknown editor mode {cfg.editor.mode!r}")
    if cfg.eval.metrics not in ("raw", "filtered", "both"):
        raise ConfigError(f"unknown metrics mode {cfg.eval.metrics!r}")


def load_config(path: str | Path | None) -> PipelineConfig:
    if path is None:
        return PipelineConfig()
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    text = path.read_text(encoding="utf-8")
    try:
        raw = json.loads(text) if path.suffix == ".json" else tomllib.loads(text)
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from None
    return config_from_dict(raw)
