"""Run configuration: dotted ``key = value`` files with per-key CLI overrides.

Every stage of the model shares ``model.depth``, ``model.widths`` and
``model.attention``; ``model.stages`` is the stage count.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

from .data import AugmentParams
from .errors import ConfigError
from .model import ModelConfig


@dataclass(frozen=True)
class OptimConfig:
    name: str = "sgd_momentum"
    lr: float = 0.05
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 4
    seed: int | None = None
    eval_every: int = 1
    dice_weight: float = 0.0
    target_dice: float = 0.0  # > 0 stops once validation Dice reaches it


@dataclass(frozen=True)
class PathsConfig:
    data: str = ""
    out: str = "runs/default"


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    augment: AugmentParams = field(default_factory=AugmentParams)
    optim: OptimConfig = field(default_factory=OptimConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def validate(self) -> None:
        if self.train.seed is None:
            raise ConfigError("train.seed is required: unseeded runs are not allowed")
        self.model.validate()
        self.augment.validate()
        if self.optim.name not in ("sgd_momentum", "adam"):
            raise ConfigError(f"optim.name must be sgd_momentum or adam, got {self.optim.name!r}")
        positives = {
            "optim.lr": self.optim.lr,
            "optim.eps": self.optim.eps,
            "train.epochs": self.train.epochs,
            "train.batch_size": self.train.batch_size,
            "train.eval_every": self.train.eval_every,
        }
        for k, v in positives.items():
            if not v > 0:
                raise ConfigError(f"{k} must be positive, got {v}")
        if not 0 <= self.optim.momentum < 1:
            raise ConfigError("optim.momentum must be in [0, 1)")

    def to_flat(self) -> dict[str, str]:
        return {k: fmt(get(self)) for k, (get, _, fmt) in KEYS.items()}


def _ints(s: str) -> tuple[int, ...]:
    return tuple(int(p) for p in s.replace("x", ",").split(",") if p.strip())


def _size(s: str) -> tuple[int, ...]:
    v = _ints(s)
    return v * 2 if len(v) == 1 else v


def _opt_int(s: str) -> int | None:
    return None if s.strip().lower() in ("", "none") else int(s)


def _join(v) -> str:
    return ",".join(str(x) for x in v)


def _stage_field(name: str):
    def get(rc: RunConfig):
        return getattr(rc.model.stages[0], name)

    def set_(rc: RunConfig, v):
        stages = tuple(replace(s, **{name: v}) for s in rc.model.stages)
        if name == "widths":
            stages = tuple(replace(s, depth=len(v)) for s in stages)
        return replace(rc, model=replace(rc.model, stages=stages))

    return get, set_


def _plain(section: str, name: str):
    def get(rc: RunConfig):
        return getattr(getattr(rc, section), name)

    def set_(rc: RunConfig, v):
        return replace(rc, **{section: replace(getattr(rc, section), **{name: v})})

    return get, set_


def _stage_count():
    def get(rc: RunConfig):
        return len(rc.model.stages)

    def set_(rc: RunConfig, v):
        proto = rc.model.stages[0]
        return replace(rc, model=replace(rc.model, stages=tuple(proto for _ in range(v))))

    return get, set_


def _build_keys() -> dict[str, tuple[Callable, Callable, Callable, Callable]]:
    """key -> (getter, setter, parser, formatter)."""
    keys: dict[str, tuple] = {}
    keys["model.stages"] = (*_stage_count(), int, str)
    keys["model.widths"] = (*_stage_field("widths"), _ints, _join)
    keys["model.attention"] = (*_stage_field("attention"), str, str)
    for name, parse, fmt_ in (
        ("num_classes", int, str),
        ("input_channels", int, str),
        ("chaining", str, str),
        ("input_size", _size, _join),
        ("context_reduction", str, str),
        ("attention_placement", str, str),
        ("dtype", str, str),
    ):
        keys[f"model.{name}"] = (*_plain("model", name), parse, fmt_)
    for name in ("contrast_alpha", "contrast_beta", "blur_sigma"):
        keys[f"augment.{name}"] = (*_plain("augment", name), float, repr)
    keys["augment.blur_kernel"] = (*_plain("augment", "blur_kernel"), int, str)
    keys["optim.name"] = (*_plain("optim", "name"), str, str)
    for name in ("lr", "momentum", "beta1", "beta2", "eps"):
        keys[f"optim.{name}"] = (*_plain("optim", name), float, repr)
    for name in ("epochs", "batch_size", "eval_every"):
        keys[f"train.{name}"] = (*_plain("train", name), int, str)
    keys["train.seed"] = (*_plain("train", "seed"), _opt_int, str)
    for name in ("dice_weight", "target_dice"):
        keys[f"train.{name}"] = (*_plain("train", name), float, repr)
    for name in ("data", "out"):
        keys[f"paths.{name}"] = (*_plain("paths", name), str, str)
    return keys


_FULL = _build_keys()
KEYS = {k: (g, p, f) for k, (g, s, p, f) in _FULL.items()}


def set_key(rc: RunConfig, key: str, raw: str) -> RunConfig:
    if key not in _FULL:
        raise ConfigError(f"unknown config key {key!r}")
    _, setter, parse, _ = _FULL[key]
    try:
        value = parse(raw.strip())
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc
    return setter(rc, value)


def parse_config_text(text: str, base: RunConfig | None = None) -> RunConfig:
    rc = base or RunConfig()
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'key = value'")
        k, v = line.split("=", 1)
        rc = set_key(rc, k.strip(), v)
    return rc


def load_config(path=None, overrides: dict[str, str] | None = None) -> RunConfig:
    rc = RunConfig()
    if path:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        rc = parse_config_text(p.read_text(), rc)
    for k, v in (overrides or {}).items():
        rc = set_key(rc, k, v)
    return rc


def dump_config(rc: RunConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in rc.to_flat().items())
