"""Versioned key-value run configuration.

One ``section.field = value`` per line, ``#`` comments, and a mandatory
``version = 1`` line. Tuples are comma separated. Sections: ``model``,
``train``, ``train.plateau`` and ``frontend``.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .features import FrontendConfig
from .model import ModelConfig
from .trainer import PlateauConfig, TrainingConfig

CONFIG_VERSION = 1


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainingConfig = field(default_factory=TrainingConfig)
    frontend: FrontendConfig = field(default_factory=FrontendConfig)


def _format(v):
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


def _parse(raw, like):
    if isinstance(like, bool):
        if raw.lower() not in ("true", "false"):
            raise ValueError(f"expected true/false, got {raw!r}")
        return raw.lower() == "true"
    if isinstance(like, int):
        return int(raw)
    if isinstance(like, float):
        return float(raw)
    if isinstance(like, tuple):
        return tuple(x.strip() for x in raw.split(",") if x.strip())
    return raw


def _items(prefix, obj):
    for f in fields(obj):
        v = getattr(obj, f.name)
        if isinstance(v, PlateauConfig):
            yield from _items(f"{prefix}.{f.name}", v)
        else:
            yield f"{prefix}.{f.name}", v


def dump_config(cfg: RunConfig) -> str:
    lines = ["# nasalsi run configuration", f"version = {CONFIG_VERSION}"]
    for section in ("model", "train", "frontend"):
        lines += [f"{k} = {_format(v)}" for k, v in _items(section, getattr(cfg, section))]
    return "\n".join(lines) + "\n"


def write_config(path, cfg: RunConfig):
    Path(path).write_text(dump_config(cfg))


def config_hash(cfg: RunConfig) -> str:
    return hashlib.sha256(dump_config(cfg).encode()).hexdigest()[:16]


def parse_config(text: str, base: RunConfig = RunConfig()) -> RunConfig:
    values = {}
    version = None
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {n}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key == "version":
            version = int(raw)
        else:
            values[key] = raw
    if version != CONFIG_VERSION:
        raise ValueError(f"config version {version} is not supported (expected {CONFIG_VERSION})")

    known = dict(_items("model", base.model))
    known.update(_items("train", base.train))
    known.update(_items("frontend", base.frontend))
    unknown = set(values) - set(known)
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")

    def build(prefix, obj):
        updates = {}
        for f in fields(obj):
            key = f"{prefix}.{f.name}"
            cur = getattr(obj, f.name)
            if isinstance(cur, PlateauConfig):
                updates[f.name] = build(key, cur)
            elif key in values:
                updates[f.name] = _parse(values[key], cur)
        return replace(obj, **updates)

    return RunConfig(build("model", base.model), build("train", base.train), build("frontend", base.frontend))


def read_config(path) -> RunConfig:
    return parse_config(Path(path).read_text())
