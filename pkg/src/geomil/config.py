"""Flat key=value run configuration covering model and optimizer fields.

Every field of :class:`ModelConfig` and :class:`TrainConfig` has a default,
so an empty (or absent) config file yields a runnable setup.  Lines are
``key = value``; blank lines and ``#`` comments are ignored.
"""

from __future__ import annotations

import dataclasses

from .model import ModelConfig
from .train import TrainConfig


class ConfigError(ValueError):
    """Unknown key or unparsable value in a run configuration."""


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    pairs: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, value = stripped.split("=", 1)
        key = key.strip()
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        if key in pairs:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        pairs[key] = value.strip()
    return pairs


def _coerce(expected_type, key: str, raw: str):
    try:
        if expected_type is int:
            return int(raw)
        if expected_type is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"cannot parse {key} = {raw!r} as {expected_type.__name__}")


def build_configs(pairs: dict[str, str]) -> tuple[ModelConfig, TrainConfig]:
    """Split raw key/value pairs into validated model and training configs."""
    model_fields = {f.name: f.type for f in dataclasses.fields(ModelConfig)}
    train_fields = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
    model_kwargs, train_kwargs = {}, {}
    for key, raw in pairs.items():
        if key in model_fields:
            default = getattr(ModelConfig(), key)
            model_kwargs[key] = _coerce(type(default), key, raw)
        elif key in train_fields:
            default = getattr(TrainConfig(), key)
            train_kwargs[key] = _coerce(type(default), key, raw)
        else:
            raise ConfigError(f"unknown config key {key!r}")
    model_cfg = ModelConfig(**model_kwargs)
    model_cfg.validate()
    return model_cfg, TrainConfig(**train_kwargs)


def load_run_config(path: str | None) -> tuple[ModelConfig, TrainConfig]:
    if path is None:
        return ModelConfig(), TrainConfig()
    with open(path, "r", encoding="utf-8") as fh:
        pairs = parse_config_text(fh.read(), source=path)
    return build_configs(pairs)
