"""Flat key-value config files (YAML or JSON) mapped onto dataclasses."""

from __future__ import annotations

import json
from dataclasses import asdict, fields, is_dataclass
from pathlib import Path
from typing import Iterable, Type, TypeVar

import yaml

T = TypeVar("T")


class ConfigFileError(ValueError):
    pass


def _coerce(value, current):
    if isinstance(value, str) and not isinstance(current, str):
        text = value.strip()
        try:
            value = float(text) if isinstance(current, float) or current is None else yaml.safe_load(text)
        except ValueError:
            value = yaml.safe_load(text)
        if current is None and isinstance(value, str) and value.lower() in ("none", "null"):
            value = None
    if isinstance(current, bool):
        if not isinstance(value, bool):
            raise ConfigFileError(f"expected a boolean, got {value!r}")
        return value
    if isinstance(current, float) and isinstance(value, int):
        return float(value)
    if isinstance(current, tuple) and isinstance(value, list):
        return tuple(value)
    return value


def parse_overrides(items: Iterable[str]) -> dict:
    out = {}
    for item in items:
        if "=" not in item:
            raise ConfigFileError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        out[key.strip()] = value
    return out


def read_mapping(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigFileError(f"config file {path} not found")
    data = yaml.safe_load(path.read_text()) or {}
    if not isinstance(data, dict):
        raise ConfigFileError(f"{path} must hold a key-value mapping")
    return data


def build_config(cls: Type[T], values: dict, base: T | None = None) -> T:
    """Apply ``values`` on top of ``base`` (or the class defaults). Dotted keys
    ``section.name`` are accepted and only the last component is used."""
    cfg = base if base is not None else cls()
    current = asdict(cfg)
    names = {f.name for f in fields(cls)}
    for key, value in values.items():
        name = key.rsplit(".", 1)[-1]
        if name not in names:
            raise ConfigFileError(f"unknown config key {key!r} for {cls.__name__}")
        current[name] = _coerce(value, current[name])
    try:
        return cls(**current)
    except (TypeError, ValueError) as exc:
        raise ConfigFileError(str(exc)) from exc


def load_config(cls: Type[T], path=None, overrides: dict | None = None, base: T | None = None) -> T:
    values = read_mapping(path) if path else {}
    values.update(overrides or {})
    return build_config(cls, values, base)


def dump_config(cfg, path) -> None:
    assert is_dataclass(cfg)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(asdict(cfg), indent=2, sort_keys=True) + "\n")
