"""Experiment configuration and its JSON file format.

A config file is a JSON object with the sections below; omitted keys take
their defaults. Example::

    {
      "seed": 0,
      "router": {"kind": "soft_moe", "k": 1, "capacity_factor": 1.0},
      "model": {"dim": 16, "hidden": 64, "experts": 4, "layers": 1},
      "data": {"classes": 8, "tokens_per_image": 16, "spread": 1.0, "images": 256},
      "optim": {"lr": 0.05, "momentum": 0.9, "steps": 2000, "batch_size": 8},
      "aux": {"importance_weight": 0.005, "load_weight": 0.005},
      "noise_std": null,
      "gate_skew": 0.0,
      "output_dir": "runs/soft_moe"
    }

``noise_std: null`` means ``1/E``. ``gate_skew`` adds a fixed logit offset
to expert 0 (stress setting for token dropping).
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from ..layer import RouterConfig, RouterKind
from ..losses import AuxLossConfig

__all__ = ["ModelConfig", "DataSpec", "OptimConfig", "ExperimentConfig"]


@dataclass
class ModelConfig:
    dim: int = 16
    hidden: int = 64
    experts: int = 4
    layers: int = 1
    residual: bool = True

    def __post_init__(self):
        if min(self.dim, self.hidden, self.experts, self.layers) < 1:
            raise ValueError("model dimensions must be >= 1")


@dataclass
class DataSpec:
    classes: int = 8
    tokens_per_image: int = 16
    spread: float = 1.0
    images: int = 256
    dim: int = 16

    def __post_init__(self):
        if self.classes < 2 or self.tokens_per_image < 1 or self.images < 1 or self.dim < 1:
            raise ValueError("invalid data spec sizes")
        if self.spread < 0:
            raise ValueError(f"spread must be >= 0, got {self.spread}")


@dataclass
class OptimConfig:
    lr: float = 0.05
    momentum: float = 0.9
    steps: int = 2000
    batch_size: int = 8

    def __post_init__(self):
        if self.lr < 0 or not 0 <= self.momentum < 1:
            raise ValueError("need lr >= 0 and 0 <= momentum < 1")
        if self.steps < 0 or self.batch_size < 1:
            raise ValueError("need steps >= 0 and batch_size >= 1")


def _build(cls, data):
    if isinstance(data, cls):
        return data
    data = dict(data or {})
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**data)


@dataclass
class ExperimentConfig:
    router: RouterConfig = field(default_factory=RouterConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataSpec | None = None  # None: defaults with dim = model.dim
    optim: OptimConfig = field(default_factory=OptimConfig)
    aux: AuxLossConfig = field(default_factory=AuxLossConfig)
    noise_std: float | None = None
    gate_skew: float = 0.0
    seed: int = 0
    log_every: int = 1
    output_dir: str | None = None

    def __post_init__(self):
        self.router = _build(RouterConfig, self.router)
        self.model = _build(ModelConfig, self.model)
        if not isinstance(self.data, DataSpec):
            data = dict(self.data or {})
            data.setdefault("dim", self.model.dim)
            self.data = DataSpec(**data)
        self.optim = _build(OptimConfig, self.optim)
        self.aux = _build(AuxLossConfig, self.aux)
        if self.data.dim != self.model.dim:
            raise ValueError(f"data dim {self.data.dim} != model dim {self.model.dim}")
        if self.data.classes > 4 * self.model.experts:
            raise ValueError("at most 4 classes per expert")
        if self.noise_std is not None and self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        if self.log_every < 1:
            raise ValueError("log_every must be >= 1")

    @property
    def effective_noise_std(self) -> float:
        return 1.0 / self.model.experts if self.noise_std is None else self.noise_std

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["router"]["kind"] = self.router.kind.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        return cls.from_dict(json.loads(text))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_json(Path(path).read_text())

    def with_router(self, **router_changes) -> "ExperimentConfig":
        """Copy with router fields changed."""
        d = self.to_dict()
        d["router"].update({k: (v.value if isinstance(v, RouterKind) else v) for k, v in router_changes.items()})
        return ExperimentConfig.from_dict(d)
