"""Flat ``key=value`` run configuration.

Keys are ``<section>.<field>``. The ``ae``, ``wm`` and ``gen`` sections mirror
the model config dataclasses; ``data`` and ``run`` hold the remaining knobs.
The sha256 of the canonical text serves as the run id.
"""

from __future__ import annotations

import dataclasses
import hashlib
from pathlib import Path

from .autoencoder import AEConfig
from .generator import GenConfig
from .world_model import WMConfig


class ConfigError(ValueError):
    pass


@dataclasses.dataclass
class DataConfig:
    n_sequences: int = 8
    n_frames: int = 6
    seed: int = 0
    layout: str = ""          # empty string: random per sequence
    weather: str = ""
    velocity: float = -1.0    # negative: random per sequence
    render: bool = True


@dataclasses.dataclass
class RunConfig:
    seed: int = 0
    horizon: int = 6
    holdout: int = 1          # sequences at the end of a dataset kept out of training
    ae_run: str = ""          # default run directories when no flag is given
    wm_run: str = ""
    gen_run: str = ""


SECTIONS = {"data": DataConfig, "run": RunConfig, "ae": AEConfig, "wm": WMConfig, "gen": GenConfig}


def _parse(raw: str, kind):
    if kind is bool:
        if raw.lower() in ("1", "true", "yes"):
            return True
        if raw.lower() in ("0", "false", "no"):
            return False
        raise ValueError(raw)
    return kind(raw)


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


class Config:
    """Resolved configuration: defaults overridden by file entries and explicit overrides."""

    def __init__(self, values: dict | None = None):
        self.sections = {name: cls() for name, cls in SECTIONS.items()}
        for key, value in (values or {}).items():
            self.set(key, value)

    def _field(self, key: str):
        section, _, name = key.partition(".")
        if section not in self.sections or not name:
            raise ConfigError(f"unknown config key {key!r}")
        obj = self.sections[section]
        fields = {f.name: f for f in dataclasses.fields(obj)}
        if name not in fields:
            raise ConfigError(f"unknown config key {key!r}")
        return obj, name, type(getattr(obj, name))

    def set(self, key: str, value) -> None:
        obj, name, kind = self._field(key)
        try:
            setattr(obj, name, _parse(value, kind) if isinstance(value, str) else kind(value))
        except ValueError as e:
            raise ConfigError(f"bad value {value!r} for {key}") from e

    def get(self, key: str):
        obj, name, _ = self._field(key)
        return getattr(obj, name)

    def __getitem__(self, section: str):
        return self.sections[section]

    def items(self):
        for section, obj in self.sections.items():
            for f in dataclasses.fields(obj):
                yield f"{section}.{f.name}", getattr(obj, f.name)

    def to_text(self) -> str:
        return "".join(f"{k}={_fmt(v)}\n" for k, v in self.items())

    def run_id(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]

    @classmethod
    def from_text(cls, text: str) -> "Config":
        values = {}
        for n, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {n}: expected key=value, got {line!r}")
            k, v = (s.strip() for s in line.split("=", 1))
            values[k] = v
        return cls(values)

    @classmethod
    def load(cls, path) -> "Config":
        return cls.from_text(Path(path).read_text())

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())
