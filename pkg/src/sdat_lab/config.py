"""Flat ``key = value`` run configuration.

Blank lines and ``#`` comments are ignored. Unknown keys are an error.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

from .losses import SmoothingMode
from .models import ModelSpec
from .optimizers import ScheduleConfig

DEFAULTS: dict[str, str] = {
    "model.input_dim": "2",
    "model.feature_dims": "16,16",
    "model.bottleneck_dim": "8",
    "model.num_classes": "2",
    "model.disc_hidden": "32",
    "model.disc_norm": "batchnorm",
    "cond": "plain",
    "opt.kind": "sgd",
    "opt.lr0": "0.01",
    "opt.disc_lr0": "",
    "opt.momentum": "0.9",
    "opt.weight_decay": "0.001",
    "sam.mode": "none",
    "sam.rho_task": "0.05",
    "sam.rho_adv": "0.0",
    "sched.a": "10",
    "sched.b": "0.75",
    "grl.gamma": "10",
    "grl.hi": "1.0",
    "grl.constant": "",
    "train.epochs": "10",
    "train.iters": "100",
    "train.batch": "32",
    "train.seed": "0",
    "train.eval_every": "1",
    "train.label_smoothing": "0.0",
    "train.record_wall_time": "false",
    "data.src": "",
    "data.tgt": "",
    "data.seed": "0",
    "data.label_noise": "0.0",
}


class ConfigError(ValueError):
    pass


def parse_config_text(text: str) -> dict[str, str]:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in DEFAULTS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = value
    return values


def format_config(values: dict[str, str]) -> str:
    return "".join(f"{k} = {values[k]}\n" for k in DEFAULTS if k in values)


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {s!r}")


@dataclass
class TrainConfig:
    values: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        unknown = set(self.values) - set(DEFAULTS)
        if unknown:
            raise ConfigError(f"unknown keys: {sorted(unknown)}")
        self.values = {**DEFAULTS, **{k: str(v) for k, v in self.values.items()}}
        self._validate()

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        return cls(parse_config_text(Path(path).read_text()))

    def updated(self, **overrides) -> "TrainConfig":
        """Copy with overrides; keyword names use ``__`` for the dot, e.g. ``sam__mode``."""
        vals = dict(self.values)
        for k, v in overrides.items():
            vals[k.replace("__", ".")] = str(v)
        return TrainConfig(vals)

    def with_values(self, mapping: dict) -> "TrainConfig":
        return TrainConfig({**self.values, **{k: str(v) for k, v in mapping.items()}})

    def text(self) -> str:
        return format_config(self.values)

    def hash(self) -> str:
        return hashlib.sha256(self.text().encode()).hexdigest()[:16]

    def __getitem__(self, key: str) -> str:
        return self.values[key]

    @property
    def model_spec(self) -> ModelSpec:
        v = self.values
        return ModelSpec(
            input_dim=int(v["model.input_dim"]),
            feature_dims=tuple(int(s) for s in v["model.feature_dims"].split(",") if s.strip()),
            bottleneck_dim=int(v["model.bottleneck_dim"]),
            num_classes=int(v["model.num_classes"]),
            disc_hidden=int(v["model.disc_hidden"]),
            disc_norm=v["model.disc_norm"],
            conditioning=v["cond"],
        )

    @property
    def smoothing(self) -> SmoothingMode:
        v = self.values
        return SmoothingMode(v["sam.mode"], float(v["sam.rho_task"]), float(v["sam.rho_adv"]))

    @property
    def schedule(self) -> ScheduleConfig:
        v = self.values
        return ScheduleConfig(float(v["opt.lr0"]), float(v["sched.a"]), float(v["sched.b"]))

    @property
    def disc_schedule(self) -> ScheduleConfig:
        v = self.values
        lr0 = v["opt.disc_lr0"].strip()
        base = self.schedule
        return base if not lr0 else ScheduleConfig(float(lr0), base.a, base.b)

    @property
    def grl_constant(self) -> float | None:
        s = self.values["grl.constant"].strip()
        return float(s) if s else None

    def get_int(self, key: str) -> int:
        return int(self.values[key])

    def get_float(self, key: str) -> float:
        return float(self.values[key])

    def get_bool(self, key: str) -> bool:
        return _bool(self.values[key])

    def _validate(self):
        try:
            spec = self.model_spec
            sm = self.smoothing
            self.schedule
            self.disc_schedule
            self.grl_constant
            batch = self.get_int("train.batch")
            for key in ("train.epochs", "train.iters", "train.eval_every"):
                if self.get_int(key) < 1:
                    raise ConfigError(f"{key} must be >= 1")
            self.get_int("train.seed")
            self.get_int("data.seed")
            self.get_bool("train.record_wall_time")
            noise = self.get_float("data.label_noise")
            alpha = self.get_float("train.label_smoothing")
        except (ValueError, KeyError) as exc:
            raise ConfigError(str(exc)) from exc
        if self.values["opt.kind"] not in ("sgd", "adam"):
            raise ConfigError(f"opt.kind must be sgd or adam, got {self.values['opt.kind']!r}")
        if spec.disc_norm == "batchnorm" and batch < 2:
            raise ConfigError("batch-norm discriminator needs train.batch >= 2")
        if batch < 1:
            raise ConfigError("train.batch must be >= 1")
        if not 0.0 <= noise <= 1.0:
            raise ConfigError("data.label_noise must lie in [0, 1]")
        if not 0.0 <= alpha < 1.0:
            raise ConfigError("train.label_smoothing must lie in [0, 1)")
        if sm.rho_task < 0 or sm.rho_adv < 0:
            raise ConfigError("rho must be non-negative")
