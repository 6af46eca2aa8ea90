"""Experiment configuration files.

One JSON document per experiment.  Every section is a dataclass and unknown
keys are rejected at every level, so a typo fails loudly instead of silently
falling back to a default.  Example::

    {
      "name": "mid-distractor",
      "poolings": ["last", "max_attention"],
      "seeds": [0, 1, 2, 3, 4],
      "data": {"synthetic": {"length": 50, "distractor_position": "mid",
                             "distractor_fraction": 0.6667}},
      "train": {"embed_dim": 32, "hidden_dim": 64, "epochs": 12},
      "nwi": {"k": 5, "length_bucket": [140, 160]}
    }
"""

from __future__ import annotations

import dataclasses
import json
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .experiments import SyntheticTask
from .perturbation import NwiConfig, PerturbSpec, default_sweep_fractions
from .pooling import PoolingKind
from .training import TrainConfig


class ConfigError(ValueError):
    """Malformed or inconsistent experiment configuration."""


# TrainConfig fields a config file may set; pooling and seed come from the grid
TRAIN_KEYS = tuple(f.name for f in dataclasses.fields(TrainConfig) if f.name not in ("pooling", "seed"))


@dataclass
class DataConfig:
    train: str | None = None
    valid: str | None = None
    test: str | None = None
    embeddings: str | None = None
    distractor_pool: str | None = None
    max_vocab: int = 25000
    min_len: int | None = None
    max_len: int | None = None
    synthetic: SyntheticTask | None = None


@dataclass
class PerturbConfig:
    position: str = "mid"
    wiki_fraction: float = 2 / 3
    seed: int = 0
    splits: list[str] = field(default_factory=lambda: ["test"])


@dataclass
class SweepConfig:
    positions: list[str] = field(default_factory=lambda: ["mid"])
    fractions: list[float] = field(default_factory=default_sweep_fractions)
    seed: int = 0


@dataclass
class NwiSection:
    k: int = 5
    length_bucket: list[int] = field(default_factory=lambda: [400, 500])
    limit: int | None = None


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    out: str = "runs"
    poolings: list[str] = field(default_factory=lambda: ["max_attention"])
    seeds: list[int] = field(default_factory=lambda: [0])
    data: DataConfig = field(default_factory=DataConfig)
    train: dict = field(default_factory=dict)
    perturb: PerturbConfig = field(default_factory=PerturbConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    nwi: NwiSection = field(default_factory=NwiSection)

    def train_config(self, pooling: str, seed: int) -> TrainConfig:
        return TrainConfig(pooling=pooling, seed=seed, **self.train)

    def nwi_config(self) -> NwiConfig:
        return NwiConfig(k=self.nwi.k, length_bucket=tuple(self.nwi.length_bucket))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def setting(self) -> dict:
        return setting_of(self.to_dict())


def setting_of(config: dict) -> dict:
    """Everything except the run grid and output location: runs sharing a setting are comparable."""
    return {k: v for k, v in config.items() if k not in ("poolings", "seeds", "out")}


SECTIONS = {"data": DataConfig, "perturb": PerturbConfig, "sweep": SweepConfig, "nwi": NwiSection}


def _reject_unknown(raw: dict, cls, where: str) -> None:
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected an object, got {type(raw).__name__}")
    unknown = sorted(set(raw) - {f.name for f in dataclasses.fields(cls)})
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {unknown}")


def _type_ok(v, hint) -> bool:
    origin, args = typing.get_origin(hint), typing.get_args(hint)
    if origin in (typing.Union, types.UnionType):
        return any(_type_ok(v, a) for a in args)
    if hint is type(None):
        return v is None
    if origin is list:
        return isinstance(v, list) and all(_type_ok(x, args[0]) for x in v)
    if hint is float:
        return isinstance(v, (int, float)) and not isinstance(v, bool)
    if hint is int:
        return isinstance(v, int) and not isinstance(v, bool)
    return isinstance(v, origin or hint)


def _check_types(obj, where: str) -> None:
    hints = typing.get_type_hints(type(obj))
    for f in dataclasses.fields(obj):
        if f.init and not _type_ok(getattr(obj, f.name), hints[f.name]):
            raise ConfigError(f"{where}.{f.name}: unexpected value {getattr(obj, f.name)!r}")


def _section(cls, raw: dict, where: str):
    _reject_unknown(raw, cls, where)
    try:
        obj = cls(**raw)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where}: {e}") from e
    _check_types(obj, where)
    return obj


def parse_config(raw: dict) -> ExperimentConfig:
    _reject_unknown(raw, ExperimentConfig, "config")
    raw = dict(raw)
    data_raw = dict(raw.pop("data", {}))
    synth = data_raw.pop("synthetic", None)
    kw = {name: _section(cls, raw.pop(name, {}), name) for name, cls in SECTIONS.items() if name != "data"}
    data = _section(DataConfig, data_raw, "data")
    if synth is not None:
        data.synthetic = _section(SyntheticTask, synth, "data.synthetic")
    train = raw.pop("train", {})
    if not isinstance(train, dict):
        raise ConfigError("train: expected an object")
    unknown = sorted(set(train) - set(TRAIN_KEYS))
    if unknown:
        raise ConfigError(f"train: unknown key(s) {unknown}")
    hints = typing.get_type_hints(TrainConfig)
    for k, v in train.items():
        if not _type_ok(v, hints[k]):
            raise ConfigError(f"train.{k}: unexpected value {v!r}")
    try:
        cfg = ExperimentConfig(data=data, train=train, **kw, **raw)
    except TypeError as e:
        raise ConfigError(str(e)) from e
    _check_types(cfg, "config")
    validate(cfg)
    return cfg


def validate(cfg: ExperimentConfig) -> None:
    """Semantic checks that need no data: grid values, section ranges, file presence."""
    if not cfg.poolings:
        raise ConfigError("poolings: empty list")
    if not cfg.seeds or not all(isinstance(s, int) and not isinstance(s, bool) for s in cfg.seeds):
        raise ConfigError("seeds: expected a nonempty list of integers")
    for p in cfg.poolings:
        try:
            PoolingKind(p)
        except ValueError:
            raise ConfigError(f"poolings: unknown pooling kind {p!r}; choose from "
                              f"{[k.value for k in PoolingKind]}") from None
    try:
        cfg.train_config(cfg.poolings[0], cfg.seeds[0])
        cfg.nwi_config()
        PerturbSpec(cfg.perturb.position, cfg.perturb.wiki_fraction)
        synth = cfg.data.synthetic
        if synth is not None and synth.distractor_position is not None:
            PerturbSpec(synth.distractor_position, synth.distractor_fraction)
        for pos in cfg.sweep.positions:
            for f in cfg.sweep.fractions:
                PerturbSpec(pos, f)
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from e
    if not set(cfg.perturb.splits) <= {"train", "valid", "test"}:
        raise ConfigError(f"perturb.splits: expected a subset of train/valid/test, got {cfg.perturb.splits}")
    d = cfg.data
    if d.synthetic is None and d.train is None:
        raise ConfigError("data: give either a training file or a synthetic task")
    if d.synthetic is not None and d.train is not None:
        raise ConfigError("data: give a training file or a synthetic task, not both")
    for key in ("train", "valid", "test", "embeddings", "distractor_pool"):
        path = getattr(d, key)
        if path is not None and not Path(path).exists():
            raise ConfigError(f"data.{key}: no such file {path}")


def load_config(path: str | Path) -> ExperimentConfig:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from None
    return parse_config(raw)
