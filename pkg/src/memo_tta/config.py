"""Run configuration: YAML documents validated against nested dataclasses.

Unknown keys are rejected at every level so typos fail loudly.
"""
from __future__ import annotations

import dataclasses
import math
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import yaml

from .adapt import AdaptationConfig
from .augment import AugmentationPolicy


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    source: str = "synthetic"
    num_classes: int = 4
    image_size: int = 32
    n_train_per_class: int = 500
    n_test_per_class: int = 125
    train_seed: int = 1
    test_seed: int = 2
    shading: float = 0.08
    grain: float = 0.03
    images_path: Optional[str] = None
    labels_path: Optional[str] = None

    def __post_init__(self):
        if self.source not in ("synthetic", "idx", "cifar"):
            raise ConfigError(f"data.source must be synthetic, idx or cifar, got {self.source!r}")


@dataclass
class ModelConfig:
    arch: str = "convsmall"
    widths: list = field(default_factory=lambda: [8, 16, 32])
    kernels: Optional[list] = None
    pool: str = "avg"
    hidden: list = field(default_factory=lambda: [64, 64])

    def to_arch(self, input_shape, num_classes) -> dict:
        arch = {"arch": self.arch, "input_shape": list(input_shape), "num_classes": int(num_classes)}
        if self.arch == "convsmall":
            arch.update(widths=list(self.widths), pool=self.pool)
            if self.kernels is not None:
                arch["kernels"] = list(self.kernels)
        elif self.arch == "mlp_bn":
            arch["hidden"] = list(self.hidden)
        else:
            raise ConfigError(f"unknown model.arch {self.arch!r}")
        return arch


@dataclass
class TrainConfig:
    epochs: int = 12
    lr: float = 0.04
    batch_size: int = 64
    momentum: float = 0.9
    weight_decay: float = 5e-4
    augment: str = "augmix"


@dataclass
class EvalConfig:
    checkpoint: Optional[str] = None
    strategies: list = field(default_factory=lambda: ["none", "tta", "memo"])
    corruptions: list = field(default_factory=lambda: ["gaussian_noise"])
    severities: list = field(default_factory=lambda: [4])
    n_points: Optional[int] = None
    B_values: list = field(default_factory=lambda: [1, 2, 4, 8, 16])
    overrides: dict = field(default_factory=dict)


@dataclass
class RunConfig:
    seed: int = 0
    parallelism: int = 1
    out_dir: str = "runs/default"
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    adapt: AdaptationConfig = field(default_factory=AdaptationConfig)
    augment: AugmentationPolicy = field(default_factory=AugmentationPolicy)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def adaptation_for(self, strategy: str) -> AdaptationConfig:
        """The shared adaptation config with ``strategy`` set and its overrides applied."""
        extra = dict(self.eval.overrides.get(strategy, {}))
        try:
            return dataclasses.replace(self.adapt, strategy=strategy, **extra)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"eval.overrides.{strategy}: {exc}") from exc

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, float) and math.isinf(obj):
        return ".inf" if obj > 0 else "-.inf"
    return obj


def _coerce(value, tp, where: str):
    origin = typing.get_origin(tp)
    if dataclasses.is_dataclass(tp):
        return _build(tp, value, where)
    if origin is typing.Union:
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if value is None:
            return None
        return _coerce(value, args[0], where)
    if tp is float or tp == "float":
        if isinstance(value, str) and value.strip().lower() in (".inf", "inf", "infinity"):
            return math.inf
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if tp is int or tp == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if tp is bool or tp == "bool":
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if tp is str or tp == "str":
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    if tp in (list, tuple) or origin in (list, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
        return tuple(value) if (tp is tuple or origin is tuple) else list(value)
    if tp is dict or origin is dict:
        if not isinstance(value, dict):
            raise ConfigError(f"{where}: expected a mapping, got {value!r}")
        return dict(value)
    return value


def _build(cls, doc, where: str):
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise ConfigError(f"{where or 'config'}: expected a mapping, got {type(doc).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(doc) - names)
    if unknown:
        prefix = f"{where}." if where else ""
        raise ConfigError(f"unknown key(s): {', '.join(prefix + k for k in unknown)}")
    kwargs = {k: _coerce(v, hints[k], f"{where}.{k}" if where else k) for k, v in doc.items()}
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from exc


def parse_config(doc: dict) -> RunConfig:
    cfg = _build(RunConfig, doc, "")
    from .adapt import STRATEGIES

    for name in list(cfg.eval.strategies) + list(cfg.eval.overrides):
        if name not in STRATEGIES:
            raise ConfigError(f"unknown strategy {name!r} in eval; expected one of {STRATEGIES}")
    for strategy in cfg.eval.strategies:
        cfg.adaptation_for(strategy)
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        doc = yaml.safe_load(path.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"could not parse {path}: {exc}") from exc
    return parse_config(doc or {})


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)
