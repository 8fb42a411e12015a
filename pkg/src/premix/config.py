"""Run configuration: nested dataclasses loaded from one JSON file."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from premix.aggregator import ArchConfig, MixConfig
from premix.augment import AugmentConfig
from premix.bagio import SynthSpec
from premix.losses import LossWeights


@dataclass(frozen=True)
class DataConfig:
    manifest: str = "data/manifest.json"
    # compute dtype for training; checkpoints are always float32
    dtype: str = "float32"


@dataclass(frozen=True)
class PretrainConfig:
    epochs: int = 300
    batch_size: int = 32
    lr_weights: float = 0.2
    lr_bias_and_norm: float = 0.0048
    warmup_epochs: int = 10
    final_factor: float = 1e-3
    weight_decay: float = 1e-6
    momentum: float = 0.9
    trust_coeff: float = 0.001
    span_mixing: bool = True
    beta_a: float = 1.0
    beta_b: float = 1.0


@dataclass(frozen=True)
class FinetuneConfig:
    epochs: int = 50
    batch_size: int = 4
    lr: float = 2e-4
    weight_decay: float = 1e-5
    step_size: int = 50
    gamma: float = 0.5
    # number of labeled pool slides used by `finetune` (None = all)
    n_labeled: int | None = None
    eval_every: int = 1


@dataclass(frozen=True)
class ALConfig:
    strategy: str = "random"
    budget: int = 20
    initial: int = 20
    iterations: int = 5


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    synth: SynthSpec = field(default_factory=SynthSpec)
    arch: ArchConfig = field(default_factory=ArchConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    mix: MixConfig = field(default_factory=MixConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    al: ALConfig = field(default_factory=ALConfig)

    def validate(self) -> None:
        self.synth.validate()
        self.arch.validate()
        self.augment.validate()
        self.loss.validate()
        if self.pretrain.epochs < 1 or self.finetune.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.pretrain.batch_size < 2:
            raise ValueError("pre-training batch size must be >= 2 (batch norm)")
        if self.finetune.batch_size < 1:
            raise ValueError("fine-tuning batch size must be >= 1")
        if self.data.dtype not in ("float32", "float64"):
            raise ValueError("data.dtype must be float32 or float64")

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def replace(self, **sections: Any) -> "RunConfig":
        """Override fields: ``cfg.replace(seed=1, pretrain={"epochs": 5})``."""
        changes = {}
        for key, val in sections.items():
            cur = getattr(self, key)
            if dataclasses.is_dataclass(cur) and isinstance(val, dict):
                changes[key] = _build(type(cur), {**dataclasses.asdict(cur), **val})
            else:
                changes[key] = val
        return dataclasses.replace(self, **changes)


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _build(cls, raw: dict):
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(raw) - set(names)
    if unknown:
        raise ValueError(f"{cls.__name__}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for key, val in raw.items():
        default = names[key].default
        if default is dataclasses.MISSING and names[key].default_factory is not dataclasses.MISSING:
            default = names[key].default_factory()
        if dataclasses.is_dataclass(default) and isinstance(val, dict):
            val = _build(type(default), val)
        elif isinstance(default, tuple) and isinstance(val, list):
            val = tuple(val)
        kwargs[key] = val
    return cls(**kwargs)


def config_from_dict(raw: dict) -> RunConfig:
    cfg = _build(RunConfig, raw)
    cfg.validate()
    return cfg


def load_config(path) -> RunConfig:
    return config_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def save_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2), encoding="utf-8")


def substream(seed: int, name: str) -> np.random.Generator:
    """Named RNG stream; toggling one component leaves the others' draws alone."""
    return np.random.default_rng([seed, zlib.crc32(name.encode())])
