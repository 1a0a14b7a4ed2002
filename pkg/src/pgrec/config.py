"""Experiment configuration: YAML sections mapped onto frozen dataclasses.

A minimal file only needs the dataset, the variant and the UPL list; every
other value falls back to the defaults below::

    dataset: {flavor: 100K, path: data/ml-100k}
    variant: content
    protocol: {upl: [10]}
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .model import Dimensions, TrainConfig
from .ranking import DENOMINATORS

VARIANTS = ("simple", "corating", "content")
FLAVORS = ("100K", "1M")


class ConfigError(ValueError):
    pass


def bundled_path(*parts) -> Path:
    """Location of a file shipped under ``pgrec/data``."""
    return Path(__file__).resolve().parent.joinpath("data", *parts)


SMOKE_CONFIG = bundled_path("mini", "smoke.yaml")


@dataclass(frozen=True)
class DatasetConfig:
    path: str = "data/ml-100k"
    flavor: str = "100K"
    subsample_users: int | None = None  # keep a random subset of users before splitting


@dataclass(frozen=True)
class ProtocolConfig:
    upl: tuple = (10,)
    n_eval: int = 10
    runs: int = 1
    seeds: tuple | None = None  # defaults to 0..runs-1
    topn: tuple = (5, 10)
    denominator: str = "candidates"


@dataclass(frozen=True)
class ModelConfig:
    rank: int = 64
    embed: int = 64
    hidden: tuple = (64, 32)
    user_clusters: int = 8
    item_clusters: int = 8
    beta: float | None = None  # None: 1 + max |W| per propagation graph
    include_ties: bool = True
    nmf_iters: int = 200
    nmf_tol: float = 1e-6


@dataclass(frozen=True)
class ExperimentConfig:
    variant: str = "simple"
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    protocol: ProtocolConfig = field(default_factory=ProtocolConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    output: str = "results"

    def __post_init__(self):
        validate(self)

    @property
    def seeds(self) -> tuple:
        p = self.protocol
        return tuple(p.seeds) if p.seeds is not None else tuple(range(p.runs))

    @property
    def dims(self) -> Dimensions:
        return Dimensions(self.model.rank, self.model.embed, tuple(self.model.hidden))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def config_hash(self) -> str:
        """Digest of everything that shapes the trained model (paths and output excluded)."""
        d = self.to_dict()
        d.pop("output")
        d["dataset"].pop("path")
        blob = json.dumps(d, sort_keys=True, default=list).encode()
        return hashlib.sha256(blob).hexdigest()

    def replace(self, **sections) -> "ExperimentConfig":
        """Copy with whole fields or ``section__key`` entries swapped out."""
        top, nested = {}, {}
        for key, value in sections.items():
            if "__" in key:
                sec, sub = key.split("__", 1)
                nested.setdefault(sec, {})[sub] = value
            else:
                top[key] = value
        for sec, values in nested.items():
            top[sec] = dataclasses.replace(top.get(sec, getattr(self, sec)), **values)
        return dataclasses.replace(self, **top)


def _positive(name, value, allow_zero=False):
    ok = value >= 0 if allow_zero else value > 0
    if not ok:
        raise ConfigError(f"{name} must be {'non-negative' if allow_zero else 'positive'}, got {value}")


def validate(cfg: ExperimentConfig) -> None:
    if cfg.variant not in VARIANTS:
        raise ConfigError(f"unknown variant {cfg.variant!r}; expected one of {VARIANTS}")
    if str(cfg.dataset.flavor).upper() not in FLAVORS:
        raise ConfigError(f"unknown dataset flavor {cfg.dataset.flavor!r}")
    if cfg.dataset.subsample_users is not None:
        _positive("dataset.subsample_users", cfg.dataset.subsample_users)
    p = cfg.protocol
    if not p.upl:
        raise ConfigError("protocol.upl must list at least one value")
    for upl in p.upl:
        if upl < 2:
            raise ConfigError(f"upl values must be >= 2, got {upl}")
    _positive("protocol.n_eval", p.n_eval)
    _positive("protocol.runs", p.runs)
    if p.seeds is not None and len(p.seeds) != p.runs:
        raise ConfigError(f"{len(p.seeds)} seeds given for {p.runs} runs")
    if not p.topn or any(n < 1 for n in p.topn):
        raise ConfigError("protocol.topn must list positive cutoffs")
    if p.denominator not in DENOMINATORS:
        raise ConfigError(f"protocol.denominator must be one of {DENOMINATORS}")
    m = cfg.model
    for name in ("rank", "embed", "user_clusters", "item_clusters", "nmf_iters"):
        _positive(f"model.{name}", getattr(m, name))
    _positive("model.nmf_tol", m.nmf_tol, allow_zero=True)
    if m.beta is not None:
        _positive("model.beta", m.beta)
    try:
        Dimensions(m.rank, m.embed, tuple(m.hidden))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if not isinstance(cfg.training, TrainConfig):
        raise ConfigError("training section must be a TrainConfig")


_SECTIONS = {"dataset": DatasetConfig, "protocol": ProtocolConfig, "model": ModelConfig, "training": TrainConfig}
_TUPLES = {"upl", "seeds", "topn", "hidden", "dropout"}


def _section(cls, raw, name):
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        raise ConfigError(f"section {name!r} must be a mapping")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown keys in {name!r}: {', '.join(sorted(unknown))}")
    values = {k: tuple(v) if k in _TUPLES and isinstance(v, list) else v for k, v in raw.items()}
    if name == "dataset" and "flavor" in values:
        values["flavor"] = str(values["flavor"]).upper()
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"section {name!r}: {exc}") from None


def from_dict(raw: dict) -> ExperimentConfig:
    raw = dict(raw or {})
    unknown = set(raw) - {"variant", "output", *_SECTIONS}
    if unknown:
        raise ConfigError(f"unknown top-level keys: {', '.join(sorted(unknown))}")
    sections = {name: _section(cls, raw.get(name), name) for name, cls in _SECTIONS.items()}
    return ExperimentConfig(variant=raw.get("variant", "simple"), output=str(raw.get("output", "results")),
                            **sections)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    cfg = from_dict(raw)
    ds = Path(cfg.dataset.path)
    if not ds.is_absolute() and (path.parent / ds).exists():
        # relative dataset paths resolve against the config file first, then the working directory
        cfg = cfg.replace(dataset__path=str(path.parent / ds))
    return cfg
