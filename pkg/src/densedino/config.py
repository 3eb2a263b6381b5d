"""Flat ``key = value`` run configuration with ``[encoder]``, ``[train]``, ``[eval]``, ``[ablate]`` sections.

Every key must name a field of the matching dataclass; unknown sections or
keys are errors so that typos in ablation sweeps fail loudly. Tuple values
are comma separated (``global_scale = 0.4, 1.0``).
"""
from __future__ import annotations

import configparser
import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .distill import TrainConfig
from .encoder import EncoderConfig
from .evaluate import EvalConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class AblateConfig:
    alpha: tuple[float, ...] = ()
    num_points: tuple[int, ...] = ()
    views: tuple[str, ...] = ()


@dataclass(frozen=True)
class RunConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    ablate: AblateConfig = field(default_factory=AblateConfig)


SECTIONS = {"encoder": EncoderConfig, "train": TrainConfig, "eval": EvalConfig, "ablate": AblateConfig}


def _parse_scalar(text: str, kind: type, key: str):
    text = text.strip()
    if kind is bool:
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {text!r}")
    try:
        return kind(text)
    except ValueError:
        raise ConfigError(f"{key}: expected {kind.__name__}, got {text!r}") from None


def parse_value(text: str, annotation, key: str):
    origin = typing.get_origin(annotation)
    if origin is tuple:
        args = typing.get_args(annotation)
        items = [t for t in text.split(",") if t.strip()]
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_parse_scalar(t, args[0], key) for t in items)
        if len(items) != len(args):
            raise ConfigError(f"{key}: expected {len(args)} comma-separated values, got {text!r}")
        return tuple(_parse_scalar(t, a, key) for t, a in zip(items, args))
    return _parse_scalar(text, annotation, key)


def from_dict(cls, values: dict, section: str = ""):
    """Build dataclass ``cls`` from plain values (JSON lists become tuples)."""
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - names
    if unknown:
        raise ConfigError(f"unknown key(s) in [{section or cls.__name__}]: {', '.join(sorted(unknown))}")
    kwargs = {}
    for key, val in values.items():
        kwargs[key] = tuple(val) if typing.get_origin(hints[key]) is tuple else val
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section or cls.__name__}] {exc}") from None


def parse_config_text(text: str) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    if parser.defaults():
        raise ConfigError("keys outside a section are not allowed")
    unknown = set(parser.sections()) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(sorted(unknown))}")
    parts = {}
    for name, cls in SECTIONS.items():
        if not parser.has_section(name):
            parts[name] = cls()
            continue
        hints = typing.get_type_hints(cls)
        values = {}
        for key, raw in parser.items(name):
            if key not in hints:
                raise ConfigError(f"unknown key in [{name}]: {key}")
            values[key] = parse_value(raw, hints[key], f"{name}.{key}")
        parts[name] = from_dict(cls, values, name)
    return RunConfig(**parts)


def load_config(path: str | Path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config_text(text)


def format_config(cfg: RunConfig) -> str:
    """Render every key with its current value; parses back to the same config."""
    lines = []
    for name in SECTIONS:
        lines.append(f"[{name}]")
        for f in dataclasses.fields(getattr(cfg, name)):
            val = getattr(getattr(cfg, name), f.name)
            text = ", ".join(repr(v) if isinstance(v, float) else str(v) for v in val) if isinstance(val, tuple) else val
            lines.append(f"{f.name} = {text}")
        lines.append("")
    return "\n".join(lines)
