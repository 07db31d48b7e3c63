"""Flat key/value experiment files (INI syntax, one ``[experiment]`` section)."""
from __future__ import annotations

import configparser
from dataclasses import fields

from .sim import ExperimentConfig

SECTION = "experiment"


class ConfigError(ValueError):
    pass


_BOOL = {"true": True, "yes": True, "1": True, "false": False, "no": False, "0": False}


def _parse_value(name, default, text):
    text = text.strip()
    try:
        if isinstance(default, bool):
            return _BOOL[text.lower()]
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            return tuple(float(v) for v in text.split(",") if v.strip())
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"field {name!r}: cannot parse {text!r}") from exc
    return text


def _format_value(value):
    if isinstance(value, tuple):
        return ", ".join(repr(float(v)) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value).lower() if isinstance(value, bool) else str(value)


def config_from_mapping(values: dict, base: ExperimentConfig | None = None) -> ExperimentConfig:
    base = base if base is not None else ExperimentConfig()
    known = {f.name: f for f in fields(ExperimentConfig)}
    kwargs = {}
    for key, text in values.items():
        if key not in known:
            raise ConfigError(f"unknown field {key!r}")
        kwargs[key] = _parse_value(key, getattr(base, key), str(text))
    try:
        return ExperimentConfig(**{**{f: getattr(base, f) for f in known}, **kwargs})
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def loads(text: str, require=("plant", "trajectory", "law")) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    if not parser.has_section(SECTION):
        raise ConfigError(f"missing [{SECTION}] section")
    values = dict(parser[SECTION])
    for key in require:
        if not values.get(key, "").strip():
            raise ConfigError(f"field {key!r} is required")
    return config_from_mapping(values)


def load(path) -> ExperimentConfig:
    with open(path) as fh:
        return loads(fh.read())


def dumps(config: ExperimentConfig) -> str:
    lines = [f"[{SECTION}]"]
    for f in fields(ExperimentConfig):
        lines.append(f"{f.name} = {_format_value(getattr(config, f.name))}")
    return "\n".join(lines) + "\n"
