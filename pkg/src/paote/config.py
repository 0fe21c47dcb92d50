"""Flat ``section.key = value`` configuration.

Sections are ``encoder``, ``model`` and ``train``. Values are layered as
defaults < config file < environment (``PAOTE_SET_<section>__<key>``) <
command-line ``--set`` overrides. Unknown keys are rejected.
"""

from __future__ import annotations

import json
import os
from dataclasses import fields
from pathlib import Path
from typing import Iterable, Mapping

from .encoder import EncoderConfig
from .model import ModelConfig
from .trainer import TrainConfig

ENV_PREFIX = "PAOTE_SET_"

_SECTIONS = {"encoder": EncoderConfig, "model": ModelConfig, "train": TrainConfig}


class ConfigError(ValueError):
    pass


def defaults() -> dict[str, object]:
    flat = {}
    for section, cls in _SECTIONS.items():
        inst = cls()
        for f in fields(cls):
            if f.name == "encoder":
                continue
            flat[f"{section}.{f.name}"] = getattr(inst, f.name)
    return flat


def _coerce(key: str, raw: object, like: object) -> object:
    if not isinstance(raw, str):
        value = raw
    elif isinstance(like, bool):
        low = raw.strip().lower()
        if low not in ("true", "false", "1", "0", "yes", "no"):
            raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
        return low in ("true", "1", "yes")
    elif isinstance(like, str):
        s = raw.strip()
        return s[1:-1] if len(s) >= 2 and s[0] == s[-1] and s[0] in "\"'" else s
    else:
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            raise ConfigError(f"{key}: cannot parse value {raw!r}") from None
    if isinstance(like, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    elif isinstance(like, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {raw!r}")
    elif isinstance(like, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {raw!r}")
        value = float(value)
    return value


def parse_lines(lines: Iterable[str], source: str = "<config>") -> dict[str, str]:
    out = {}
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        sep = "=" if "=" in line else ":" if ":" in line else None
        if sep is None:
            raise ConfigError(f"{source}:{n}: expected 'key = value'")
        key, value = (x.strip() for x in line.split(sep, 1))
        out[key] = value
    return out


def parse_overrides(items: Iterable[str]) -> dict[str, str]:
    out = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like key=value")
        k, v = item.split("=", 1)
        out[k.strip()] = v
    return out


def env_overrides(environ: Mapping[str, str] | None = None) -> dict[str, str]:
    environ = os.environ if environ is None else environ
    out = {}
    for k, v in environ.items():
        if k.startswith(ENV_PREFIX):
            out[k[len(ENV_PREFIX) :].lower().replace("__", ".", 1)] = v
    return out


def resolve(
    path: str | Path | None = None,
    overrides: Iterable[str] = (),
    environ: Mapping[str, str] | None = None,
) -> dict[str, object]:
    flat = defaults()
    layers = []
    if path:
        layers.append(parse_lines(Path(path).read_text(encoding="utf-8").splitlines(), str(path)))
    layers.append(env_overrides(environ))
    layers.append(parse_overrides(overrides))
    for layer in layers:
        for key, raw in layer.items():
            if key not in flat:
                raise ConfigError(f"unknown config key {key!r}")
            flat[key] = _coerce(key, raw, flat[key])
    return flat


def build_configs(flat: Mapping[str, object]) -> tuple[ModelConfig, TrainConfig]:
    try:
        enc = EncoderConfig(**{k.split(".", 1)[1]: v for k, v in flat.items() if k.startswith("encoder.")})
        model = {k.split(".", 1)[1]: v for k, v in flat.items() if k.startswith("model.")}
        train = {k.split(".", 1)[1]: v for k, v in flat.items() if k.startswith("train.")}
        return ModelConfig(encoder=enc, **model), TrainConfig(**train)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def dump(flat: Mapping[str, object]) -> str:
    return "".join(f"{k} = {json.dumps(v) if not isinstance(v, str) else v}\n" for k, v in sorted(flat.items()))
