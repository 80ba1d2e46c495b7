"""Flat ``section.key = value`` experiment configuration.

Every key maps onto a field of one of the component configs. Unknown keys
are rejected so typos cannot silently fall back to defaults. The master
``seed`` is the only seed: sections do not carry their own.
"""

from __future__ import annotations

import hashlib
import json
import typing
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .adapt import AdaptConfig
from .gem import GemConfig
from .model import TrunkConfig
from .objectives import MarginState
from .toy import ToyConfig
from .train import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    n_classes: int = 20
    per_class: int = 50
    size: int = 64
    val_per_class: int = 10
    n_distractors: int = 200


@dataclass
class WhiteningConfig:
    floor: float = 1e-6
    shrinkage: float = 0.0


@dataclass
class EvalConfig:
    resolution: int = 32
    base_resolution: int = 32
    p_star: float | None = None
    inaug_per_class: int = 2
    partition: str = "val"


@dataclass
class ExperimentConfig:
    seed: int = 0
    out: str = "out"
    data: DataConfig = field(default_factory=DataConfig)
    trunk: TrunkConfig = field(default_factory=TrunkConfig)
    gem: GemConfig = field(default_factory=GemConfig)
    margin: MarginState = field(default_factory=MarginState)
    train: TrainConfig = field(default_factory=TrainConfig)
    whitening: WhiteningConfig = field(default_factory=WhiteningConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    adapt: AdaptConfig = field(default_factory=lambda: AdaptConfig(resolution=64))
    toy: ToyConfig = field(default_factory=ToyConfig)

    def to_dict(self) -> dict:
        d = asdict(self)
        for section in ("train", "adapt", "toy"):
            d[section].pop("seed", None)
        d["margin"].pop("dim", None)  # always the trunk width
        return _jsonable(d)

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def train_config(self) -> TrainConfig:
        return TrainConfig(**{**_fields(self.train), "seed": self.seed})

    def toy_config(self) -> ToyConfig:
        return ToyConfig(**{**_fields(self.toy), "seed": self.seed})

    def adapt_config(self) -> AdaptConfig:
        return AdaptConfig(**{**_fields(self.adapt), "seed": self.seed})


SECTIONS = ("data", "trunk", "gem", "margin", "train", "whitening", "eval", "adapt", "toy")
_RESERVED = {("train", "seed"), ("adapt", "seed"), ("toy", "seed"), ("margin", "dim")}


def _fields(obj) -> dict:
    return {f.name: getattr(obj, f.name) for f in fields(obj)}


def _jsonable(v):
    if isinstance(v, dict):
        return {k: _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    return v


def _parse(raw: str, hint, key: str):
    raw = raw.strip()
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin in (typing.Union, getattr(__import__("types"), "UnionType", None)):
        if raw.lower() in ("none", "null", ""):
            if type(None) in args:
                return None
        inner = [a for a in args if a is not type(None)]
        return _parse(raw, inner[0], key)
    if origin is tuple:
        item = args[0] if args else float
        parts = [p for p in raw.replace(";", ",").split(",") if p.strip()]
        return tuple(_parse(p, item, key) for p in parts)
    try:
        if hint is bool:
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if hint is int:
            return int(raw)
        if hint is float:
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {getattr(hint, '__name__', hint)}") from None
    return raw


def _hints(cls) -> dict:
    import sys

    module = sys.modules[cls.__module__]
    return typing.get_type_hints(cls, vars(module))


def parse_lines(lines, cfg: ExperimentConfig | None = None) -> ExperimentConfig:
    """Apply ``key = value`` lines (``#`` starts a comment) on top of ``cfg``."""
    values: dict[str, dict] = {s: {} for s in SECTIONS}
    top: dict = {}
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key = value, got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key in ("seed", "out"):
            top[key] = int(_parse(raw, int, key)) if key == "seed" else raw
            continue
        section, _, name = key.partition(".")
        if section not in SECTIONS or not name:
            raise ConfigError(f"unknown config key {key!r}")
        cls = type(getattr(cfg or ExperimentConfig(), section))
        hints = _hints(cls)
        if name not in hints or (section, name) in _RESERVED:
            raise ConfigError(f"unknown config key {key!r}")
        values[section][name] = _parse(raw, hints[name], key)
    base = cfg or ExperimentConfig()
    out = ExperimentConfig(seed=top.get("seed", base.seed), out=top.get("out", base.out))
    for section in SECTIONS:
        current = _fields(getattr(base, section))
        try:
            setattr(out, section, type(getattr(base, section))(**{**current, **values[section]}))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"[{section}] {exc}") from exc
    return out


def load_config(path=None, overrides=()) -> ExperimentConfig:
    cfg = ExperimentConfig()
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise FileNotFoundError(f"config file {p} does not exist")
        cfg = parse_lines(p.read_text().splitlines(), cfg)
    return parse_lines(list(overrides), cfg)


def dump_config(cfg: ExperimentConfig) -> str:
    lines = [f"seed = {cfg.seed}", f"out = {cfg.out}"]
    d = cfg.to_dict()
    for section in SECTIONS:
        for k, v in d[section].items():
            if isinstance(v, list):
                v = ",".join(str(x) for x in v)
            lines.append(f"{section}.{k} = {v}")
    return "\n".join(lines) + "\n"
