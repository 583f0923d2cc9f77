"""Experiment configuration: strict YAML schema with lossless round-trip."""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field, fields
from importlib import resources
from pathlib import Path

import yaml

from .model import ARCHITECTURES, BN_MODES
from .reparam import TOPOLOGIES
from .trainer import STRATEGIES, StageConfig, StrategyConfig

__all__ = ["ConfigError", "DatasetSpec", "QATSpec", "LayerOverride", "ExperimentConfig",
           "load_config", "dump_config", "resolve_config_path", "OUTPUT_DIR_ENV"]

OUTPUT_DIR_ENV = "REPQ_OUTPUT_DIR"


class ConfigError(ValueError):
    pass


def _build(cls, data, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(data).__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(map(repr, unknown))}")
    try:
        return cls(**data)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


@dataclass
class DatasetSpec:
    kind: str = "synthetic"
    n_train: int = 5000
    n_eval: int = 1000
    seed: int = 1234
    noise: float = 0.5
    path: str | None = None
    eval_fraction: float = 0.2

    def __post_init__(self):
        if self.kind not in ("synthetic", "folder"):
            raise ConfigError(f"dataset.kind must be 'synthetic' or 'folder', got {self.kind!r}")
        if self.kind == "folder" and not self.path:
            raise ConfigError("dataset.path is required for kind 'folder'")


@dataclass
class QATSpec:
    epochs: int = 2
    lr_scale: float = 0.1
    steps_lr_ratio: float = 0.1


@dataclass
class LayerOverride:
    bits: int | None = None
    use_bn_est: bool | None = None
    keep_bn: bool | None = None


_REQUIRED = ("name", "model", "strategy", "bits")


@dataclass
class ExperimentConfig:
    name: str
    model: str
    strategy: str
    bits: list[int]
    topology: str | list[str] = "repvgg"
    bn_mode: str = "exact_fold"
    keep_bn_last: int = 0
    layer_overrides: dict[int, LayerOverride] = field(default_factory=dict)
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    fp: StageConfig = field(default_factory=lambda: StageConfig(epochs=3))
    qat: QATSpec = field(default_factory=QATSpec)
    seeds: list[int] = field(default_factory=lambda: [0])
    output_dir: str = "runs"

    def __post_init__(self):
        if self.model not in ARCHITECTURES:
            raise ConfigError(f"model must be one of {sorted(ARCHITECTURES)}, got {self.model!r}")
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"strategy must be one of {sorted(STRATEGIES)}, got {self.strategy!r}")
        if self.bn_mode not in BN_MODES:
            raise ConfigError(f"bn_mode must be one of {BN_MODES}, got {self.bn_mode!r}")
        if isinstance(self.bits, int):
            self.bits = [self.bits]
        if not self.bits or any(not isinstance(b, int) or b < 2 or b > 32 for b in self.bits):
            raise ConfigError(f"bits must be a non-empty list of integers in [2, 32], got {self.bits!r}")
        topos = [self.topology] if isinstance(self.topology, str) else self.topology
        bad = [t for t in topos if t not in TOPOLOGIES]
        if bad:
            raise ConfigError(f"unknown topology {bad[0]!r}; choose from {TOPOLOGIES}")
        if not self.seeds:
            raise ConfigError("seeds must not be empty")

    # -- derived views
    @property
    def n_layers(self) -> int:
        return len(ARCHITECTURES[self.model][0])

    def strategy_config(self) -> StrategyConfig:
        layer_bits, use_est = {}, {}
        for i, ov in self.layer_overrides.items():
            if ov.bits is not None:
                layer_bits[i] = ov.bits
            if ov.use_bn_est is not None:
                use_est[i] = ov.use_bn_est
            if ov.keep_bn:
                use_est[i] = False
        topo = self.topology
        return StrategyConfig(
            name=self.strategy, bn_mode=self.bn_mode,
            topology=topo if isinstance(topo, str) else "custom",
            layer_topologies=None if isinstance(topo, str) else list(topo),
            layer_bits=layer_bits, use_bn_est=use_est, keep_bn_last=self.keep_bn_last)

    def qat_stage(self) -> StageConfig:
        return StageConfig(epochs=self.qat.epochs, batch_size=self.fp.batch_size,
                           lr=self.fp.lr * self.qat.lr_scale, weight_decay=self.fp.weight_decay,
                           momentum=self.fp.momentum, bn_momentum=self.fp.bn_momentum,
                           steps_lr_ratio=self.qat.steps_lr_ratio, max_steps=self.fp.max_steps)

    def resolved_output_dir(self) -> Path:
        return Path(os.environ.get(OUTPUT_DIR_ENV) or self.output_dir)

    # -- serialization
    def to_dict(self) -> dict:
        d = asdict(self)
        d["layer_overrides"] = {int(k): {kk: vv for kk, vv in v.items() if vv is not None}
                                for k, v in d["layer_overrides"].items()}
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        if not isinstance(data, dict):
            raise ConfigError("config must be a mapping at the top level")
        missing = [k for k in _REQUIRED if k not in data]
        if missing:
            raise ConfigError(f"missing required key(s): {', '.join(missing)}")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown key(s) {', '.join(map(repr, unknown))}")
        d = dict(data)
        if "dataset" in d:
            d["dataset"] = _build(DatasetSpec, d["dataset"], "dataset")
        if "fp" in d:
            d["fp"] = _build(StageConfig, d["fp"], "fp")
        if "qat" in d:
            d["qat"] = _build(QATSpec, d["qat"], "qat")
        if "layer_overrides" in d:
            lo = d["layer_overrides"] or {}
            if not isinstance(lo, dict):
                raise ConfigError("layer_overrides must map layer index to settings")
            d["layer_overrides"] = {int(k): _build(LayerOverride, v, f"layer_overrides.{k}")
                                    for k, v in lo.items()}
        try:
            return cls(**d)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc


def load_config(path: str | Path) -> ExperimentConfig:
    path = resolve_config_path(path)
    with open(path) as fh:
        try:
            data = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: not valid YAML: {exc}") from exc
    return ExperimentConfig.from_dict(data)


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)


def resolve_config_path(path: str | Path) -> Path:
    """A real file, or the name of a bundled config (``plain_8bit``)."""
    p = Path(path)
    if p.exists():
        return p
    bundled = resources.files("repq") / "configs" / f"{p.stem}.yaml"
    if bundled.is_file():
        return Path(str(bundled))
    raise ConfigError(f"config {path} not found (and no bundled config named {p.stem!r})")
