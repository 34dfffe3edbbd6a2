"""TOML run configuration with ``[backbone]``, ``[train]``, ``[data]`` and ``[eval]`` sections.

``RunConfig()`` is the desk recipe; every TOML key overrides one field of it.
``[train]`` configures adaptor training and ``[train.backbone]`` overrides it
for backbone pre-training.
"""

from __future__ import annotations

import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .backbone import BackboneConfig, config_digest
from .data import DataConfig
from .evaluation import EvalConfig
from .numerics import ConfigError
from .trainer import TrainConfig


@dataclass(frozen=True)
class RunConfig:
    backbone: BackboneConfig = field(default_factory=lambda: BackboneConfig(levels=(32, 64, 64)))
    train: TrainConfig = field(default_factory=lambda: TrainConfig(base_lr=1e-2))
    backbone_train: TrainConfig = field(default_factory=lambda: TrainConfig(steps=10_000, base_lr=3e-3))
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict:
        return {
            "backbone": self.backbone.to_dict(),
            "train": asdict(self.train),
            "backbone_train": asdict(self.backbone_train),
            "data": asdict(self.data),
            "eval": asdict(self.eval),
        }

    def digest(self) -> str:
        return config_digest(self.to_dict())

    def with_seed(self, seed: int) -> "RunConfig":
        return RunConfig(
            self.backbone,
            replace(self.train, seed=seed),
            replace(self.backbone_train, seed=seed),
            replace(self.data, seed=seed),
            replace(self.eval, seed=seed),
        )

    def with_precision(self, precision: str) -> "RunConfig":
        return replace(self, train=replace(self.train, precision=precision),
                       backbone_train=replace(self.backbone_train, precision=precision))


def _section(cls, raw: dict, name: str, base):
    known = {f.name for f in fields(cls)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown keys in [{name}]: {', '.join(sorted(unknown))}")
    if "levels" in raw:
        raw = {**raw, "levels": tuple(raw["levels"])}
    try:
        return replace(base, **raw)
    except TypeError as exc:
        raise ConfigError(f"bad [{name}] section: {exc}") from None


def parse_config(raw: dict) -> RunConfig:
    known = {"backbone", "train", "data", "eval"}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown config sections: {', '.join(sorted(unknown))}")
    recipe = RunConfig()
    train_raw = dict(raw.get("train", {}))
    bb_train_raw = train_raw.pop("backbone", {})
    train = _section(TrainConfig, train_raw, "train", recipe.train)
    bb_train = _section(TrainConfig, {**train_raw, **bb_train_raw}, "train.backbone", recipe.backbone_train)
    return RunConfig(
        _section(BackboneConfig, raw.get("backbone", {}), "backbone", recipe.backbone),
        train,
        bb_train,
        _section(DataConfig, raw.get("data", {}), "data", recipe.data),
        _section(EvalConfig, raw.get("eval", {}), "eval", recipe.eval),
    )


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    with open(path, "rb") as fh:
        try:
            raw = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    return parse_config(raw)
