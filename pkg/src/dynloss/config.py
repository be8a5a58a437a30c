"""Experiment configuration: a flat ``key = value`` file, overridable from the command line."""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, fields
from pathlib import Path

from .engine import ModelConfig, StageConfig

DATASETS = ("mnist01", "moons", "blobs")


class ConfigError(ValueError):
    """Bad key, bad value, or a value that fails validation; carries the offending key."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass
class ExperimentConfig:
    # teaching loop
    N: int = 5
    K: int = 40
    eta: float = 0.1
    gamma: float = 0.001
    teacher_lr: float = 0.001
    w: float = 1.0
    val_ratio: float = 0.5
    train_batch: int = 25
    val_batch: int = 100
    epochs: int = 10
    seed: int = 0
    nonfinite: str = "raise"
    dln_input: str = "probability"
    # networks
    student_hidden: tuple = (32, 32)
    dln_sizes: tuple = (2, 40, 40, 40, 40, 1)
    teacher_hidden: tuple = (64, 64, 64, 1)
    teacher_mode: str = "log_sign"
    teacher_zero_output: bool = True
    dln_optimizer: str = "lstm"
    warm_start: bool = True
    warm_start_steps: int = 600
    warm_start_lr: float = 0.005
    # data and output
    dataset: str = "mnist01"
    data_dir: str = "data/mnist01"
    classes: tuple = (0, 1)
    synthetic_n: int = 400
    synthetic_noise: float = 0.1
    out: str = ""

    def stage(self) -> StageConfig:
        names = {f.name for f in fields(StageConfig)} - {"M"}
        return StageConfig(**{n: getattr(self, n) for n in names})

    def model(self) -> ModelConfig:
        return ModelConfig(**{f.name: getattr(self, f.name) for f in fields(ModelConfig)})

    def validate(self) -> "ExperimentConfig":
        if self.dataset not in DATASETS:
            raise ConfigError("dataset", f"must be one of {DATASETS}")
        for build in (self.stage, self.model):
            try:
                build()
            except ValueError as exc:
                raise ConfigError(_guess_key(str(exc)), str(exc)) from exc
        return self

    def to_text(self) -> str:
        return "".join(f"{f.name} = {_format(getattr(self, f.name))}\n" for f in fields(self))

    def as_dict(self) -> dict:
        return {f.name: (list(v) if isinstance(v := getattr(self, f.name), tuple) else v) for f in fields(self)}


def _guess_key(message: str) -> str:
    for f in fields(ExperimentConfig):
        if message.startswith(f.name) or f" {f.name} " in f" {message} ":
            return f.name
    return "config"


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(str(v) for v in value)
    return str(value)


_TYPES = typing.get_type_hints(ExperimentConfig)


def parse_value(key: str, text: str):
    if key not in _TYPES:
        raise ConfigError(key, "unknown key")
    kind = _TYPES[key]
    text = text.strip()
    try:
        if kind is bool:
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(f"expected a boolean, got {text!r}")
            return low in ("true", "1", "yes")
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        if kind is tuple:
            parts = [p for p in text.replace(",", " ").split() if p]
            return tuple(int(p) for p in parts)
        return text
    except ValueError as exc:
        raise ConfigError(key, str(exc)) from exc


def parse_text(text: str, source: str = "<config>") -> dict:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}", "expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in values:
            raise ConfigError(key, f"set twice ({source}:{lineno})")
        values[key] = parse_value(key, value)
    return values


def load_config(path=None, overrides: dict | None = None) -> ExperimentConfig:
    """Defaults, then the file at ``path``, then ``overrides`` (already typed or raw strings)."""
    values = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError("config", f"no such file {path}")
        values.update(parse_text(path.read_text(), str(path)))
    for key, value in (overrides or {}).items():
        if isinstance(value, str):
            value = parse_value(key, value)
        elif isinstance(value, list):
            value = tuple(value)
        values[key] = value
    unknown = set(values) - set(_TYPES)
    if unknown:
        raise ConfigError(sorted(unknown)[0], "unknown key")
    return dataclasses.replace(ExperimentConfig(), **values).validate()
