"""Run configuration: embedding, model and training sections.

Config files are JSON objects with optional ``embed``, ``model`` and
``train`` sections; unknown keys are rejected. ``section.key=value``
overrides (from ``--set``) win over file values.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

from .embed_init import EmbedConfig
from .expert_net import ModelConfig

__all__ = ["TrainConfig", "RunConfig", "ConfigError", "NEG_MODES", "ABLATIONS"]

NEG_MODES = ("auto", "full", "sampled")
ABLATIONS = ("moe", "feat", "freqreg", "aug")
FULL_SOFTMAX_MAX_NODES = 4096


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 4096
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 1
    max_steps: int | None = None
    neg_mode: str = "auto"
    num_neg: int = 256
    dropout_p: float = 0.1
    rho: float = 0.2
    route_sample_size: int = 1024
    reproject_fraction: int = 10
    reproject_min_steps: int = 100
    test_ratio: float = 0.2
    moe_off: bool = False
    feat_off: bool = False
    freqreg_off: bool = False
    aug_off: bool = False
    log_every: int = 50
    checkpoint_every: int = 0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.lr <= 0:
            raise ConfigError("lr must be > 0")
        if self.neg_mode not in NEG_MODES:
            raise ConfigError(f"neg_mode must be one of {NEG_MODES}")
        if self.neg_mode != "full" and self.num_neg < 1:
            raise ConfigError("num_neg must be >= 1 for sampled negatives")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError("dropout_p must be in [0, 1)")
        if not 0.0 <= self.rho <= 2.0:
            raise ConfigError("rho must be in [0, 2]")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")

    def neg_mode_for(self, num_nodes: int) -> str:
        if self.neg_mode != "auto":
            return self.neg_mode
        return "full" if num_nodes <= FULL_SOFTMAX_MAX_NODES else "sampled"


_SECTIONS = {"embed": EmbedConfig, "model": ModelConfig, "train": TrainConfig}


def _build(cls, section: str, values: dict[str, Any]):
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown {section} keys: {', '.join(unknown)}")
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {section} config: {exc}") from None


def _coerce(raw: str) -> Any:
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


@dataclass(frozen=True)
class RunConfig:
    embed: EmbedConfig = field(default_factory=EmbedConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def to_dict(self) -> dict[str, Any]:
        return {"embed": asdict(self.embed), "model": asdict(self.model), "train": asdict(self.train)}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "RunConfig":
        unknown = sorted(set(data) - set(_SECTIONS))
        if unknown:
            raise ConfigError(f"unknown config sections: {', '.join(unknown)}")
        parts = {name: _build(kind, name, dict(data.get(name, {}))) for name, kind in _SECTIONS.items()}
        return cls(**parts)

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}:{exc.lineno}: {exc.msg}") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be an object")
        return cls.from_dict(data)

    def with_overrides(self, overrides: list[str] | None) -> "RunConfig":
        data = self.to_dict()
        for item in overrides or []:
            key, sep, raw = item.partition("=")
            section, dot, name = key.strip().partition(".")
            if not sep or not dot or section not in data:
                raise ConfigError(f"override {item!r} must look like section.key=value")
            if name not in data[section]:
                raise ConfigError(f"unknown {section} key {name!r}")
            data[section][name] = _coerce(raw.strip())
        return RunConfig.from_dict(data)

    def resolved(self) -> "RunConfig":
        """Apply ablation flags to the sections they affect."""
        t = self.train
        model = replace(self.model, num_experts=1) if t.moe_off else self.model
        embed = replace(self.embed, use_features=False) if t.feat_off else self.embed
        train = replace(t, rho=0.0) if t.freqreg_off else t
        if embed.dim != model.dim:
            raise ConfigError(f"embed.dim ({embed.dim}) must equal model.dim ({model.dim})")
        return RunConfig(embed=embed, model=model, train=train)

    def with_ablation(self, name: str) -> "RunConfig":
        if name not in ABLATIONS:
            raise ConfigError(f"unknown ablation {name!r}; expected one of {ABLATIONS}")
        return replace(self, train=replace(self.train, **{f"{name}_off": True}))

    @classmethod
    def desk(cls, dim: int = 64, layers: int = 2, experts: int = 4, **train: Any) -> "RunConfig":
        """Small laptop-scale preset."""
        base = dict(batch_size=256, lr=1e-3, reproject_min_steps=100)
        base.update(train)
        return cls(
            embed=EmbedConfig(dim=dim),
            model=ModelConfig(dim=dim, layers=layers, num_experts=experts),
            train=TrainConfig(**base),
        )
