"""Experiment configuration files (JSON), parsed strictly: unknown keys are errors."""
from __future__ import annotations

import dataclasses
import json
import os
import types
import typing
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .backbone import BackboneConfig, ModalityEncoderConfig
from .data import ModalitySpec, SyntheticConfig
from .training import TrainConfig

SEED_ENV = "MMPROMPT_SEED"
PROMPT_TEMPLATE = ("Below is a text that describes a movie. Predict the {task} according to the text. "
                   "### Text: {text} ###{task} tendency:")


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    dir: str | None = None
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)


def _default_encoders() -> list:
    return [ModalityEncoderConfig("a"), ModalityEncoderConfig("v")]


@dataclass
class ExperimentConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    encoders: list = field(default_factory=_default_encoders)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    output_dir: str | None = None
    prompt_template: str = PROMPT_TEMPLATE
    task_name: str = "sentiment"

    def validate(self) -> None:
        try:
            self.backbone.validate([e.d_m for e in self.encoders])
            self.train.validate(self.backbone.n_layers)
            for e in self.encoders:
                e.validate(self.train.prompt_depth)
            self.data.synthetic.validate(self.backbone)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        names = [e.modality for e in self.encoders]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate encoder modalities: {names}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["data"]["synthetic"] = self.data.synthetic.to_dict()
        return d

    def meta(self) -> dict:
        return {"prompt_template": self.prompt_template, "task_name": self.task_name}


# ----------------------------------------------------------------------------

_NESTED = {"backbone": BackboneConfig, "train": TrainConfig, "data": DataConfig,
           "synthetic": SyntheticConfig}


def _check_scalar(value, hint, where: str):
    args = typing.get_args(hint)
    origin = typing.get_origin(hint)
    if origin in (typing.Union, types.UnionType):
        if value is None and type(None) in args:
            return value
        hint = next(a for a in args if a is not type(None))
    if hint is bool:
        ok = isinstance(value, bool)
    elif hint is int:
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif hint is float:
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif hint is str:
        ok = isinstance(value, str)
    elif hint in (dict, tuple, list):
        ok = isinstance(value, (dict,) if hint is dict else (list, tuple))
    else:
        ok = True
    if not ok:
        raise ConfigError(f"{where}: expected {getattr(hint, '__name__', hint)}, got {type(value).__name__}")
    return value


def _build(cls, raw, where: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected an object, got {type(raw).__name__}")
    hints = typing.get_type_hints(cls)
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {unknown}")
    kwargs = {}
    for key, value in raw.items():
        path = f"{where}.{key}"
        if key in _NESTED:
            kwargs[key] = _build(_NESTED[key], value, path)
        elif cls is ExperimentConfig and key == "encoders":
            if not isinstance(value, list):
                raise ConfigError(f"{path}: expected a list")
            kwargs[key] = [_build(ModalityEncoderConfig, e, f"{path}[{i}]") for i, e in enumerate(value)]
        elif cls is SyntheticConfig and key == "modalities":
            if not isinstance(value, dict):
                raise ConfigError(f"{path}: expected an object")
            kwargs[key] = {m: _build(ModalitySpec, s, f"{path}.{m}") for m, s in value.items()}
        else:
            kwargs[key] = _check_scalar(value, hints[key], path)
    missing = [f.name for f in dataclasses.fields(cls)
               if f.name not in kwargs and f.default is dataclasses.MISSING
               and f.default_factory is dataclasses.MISSING]
    if missing:
        raise ConfigError(f"{where}: missing required key(s) {missing}")
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def config_from_dict(raw: dict, env: dict | None = None) -> ExperimentConfig:
    cfg = _build(ExperimentConfig, raw, "config")
    env = os.environ if env is None else env
    if env.get(SEED_ENV):
        try:
            cfg.train.seed = int(env[SEED_ENV])
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env[SEED_ENV]!r}") from exc
    cfg.validate()
    return cfg


def load_config(path, env: dict | None = None) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return config_from_dict(raw, env)
