"""Flat ``key = value`` configuration with dotted sections and strict key checking."""

from __future__ import annotations

from dataclasses import fields

import numpy as np

from .extract import ExtractConfig
from .strands import GrowthConfig
from .supervise.invert import InvertConfig
from .supervise.train import TrainConfig
from .teacher import TeacherLatent


class ConfigError(ValueError):
    """Unknown key, malformed line or invalid value."""


def _fmt(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, (tuple, list)):
        return " ".join(_fmt(x) for x in v)
    if isinstance(v, float):
        return repr(float(v))
    return str(v)


def _dataclass_items(obj, prefix: str) -> dict:
    return {prefix + f.name: _fmt(getattr(obj, f.name)) for f in fields(obj)}


def _build(cls, items: dict, prefix: str, defaults):
    kwargs = {}
    for f in fields(cls):
        key = prefix + f.name
        if key not in items:
            continue
        raw = items[key]
        current = getattr(defaults, f.name)
        try:
            if raw.strip().lower() == "none":
                value = None
            elif isinstance(current, tuple) or (current is None and " " in raw.strip()):
                value = tuple(float(x) for x in raw.split())
            elif isinstance(current, bool):
                value = raw.strip().lower() in ("1", "true", "yes")
            elif isinstance(current, int):
                value = int(float(raw)) if float(raw).is_integer() else _bad(key, raw)
            elif isinstance(current, float):
                value = float(raw)
            else:
                value = raw.strip()
        except ValueError:
            raise ConfigError(f"invalid value for {key}: {raw!r}") from None
        kwargs[f.name] = value
    try:
        return cls(**{**{f.name: getattr(defaults, f.name) for f in fields(cls)}, **kwargs})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {prefix.rstrip('.')} settings: {exc}") from None


def _bad(key, raw):
    raise ConfigError(f"{key} expects an integer, got {raw!r}")


# (section prefix, dataclass, default instance)
SECTIONS = (
    ("teacher.", TeacherLatent, TeacherLatent()),
    ("train.", TrainConfig, TrainConfig()),
    ("extract.", ExtractConfig, ExtractConfig()),
    ("strands.", GrowthConfig, GrowthConfig()),
    ("invert.", InvertConfig, InvertConfig()),
)

# keys outside the dataclasses
EXTRA_DEFAULTS = {
    "render.sdf_sign": "1",
    "train.num_latents": "1",
    "eval.view_index": "-1",
}


def default_items() -> dict:
    out = {}
    for prefix, _, obj in SECTIONS:
        out.update(_dataclass_items(obj, prefix))
    out.update(EXTRA_DEFAULTS)
    return out


class Config:
    """Ordered key/value store; only keys with a documented default are accepted."""

    def __init__(self, items: dict | None = None):
        self.items = default_items()
        for k, v in (items or {}).items():
            self.set(k, v)
        self.validate()

    def set(self, key: str, value) -> None:
        key = key.strip()
        if key not in self.items:
            raise ConfigError(f"unknown config key: {key}")
        self.items[key] = _fmt(value) if not isinstance(value, str) else value.strip()

    def get(self, key: str) -> str:
        if key not in self.items:
            raise ConfigError(f"unknown config key: {key}")
        return self.items[key]

    def get_int(self, key: str) -> int:
        try:
            return int(self.get(key))
        except ValueError:
            raise ConfigError(f"{key} expects an integer, got {self.get(key)!r}") from None

    @classmethod
    def parse(cls, text: str) -> "Config":
        items = {}
        for n, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {n}: expected key = value, got {line!r}")
            key, value = (p.strip() for p in line.split("=", 1))
            if key in items:
                raise ConfigError(f"line {n}: duplicate key {key}")
            items[key] = value
        return cls(items)

    @classmethod
    def load(cls, path) -> "Config":
        try:
            with open(path) as fh:
                return cls.parse(fh.read())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None

    def dumps(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in self.items.items())

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.dumps())

    def validate(self) -> None:
        self.teacher()
        self.train()
        self.extract()
        self.strands()
        self.invert()
        if self.get("render.sdf_sign") not in ("1", "-1"):
            raise ConfigError("render.sdf_sign must be 1 or -1")
        if self.get_int("train.num_latents") < 1:
            raise ConfigError("train.num_latents must be >= 1")
        self.get_int("eval.view_index")

    def _section(self, index: int):
        prefix, cls, obj = SECTIONS[index]
        return _build(cls, self.items, prefix, obj)

    def teacher(self) -> TeacherLatent:
        return self._section(0)

    def train(self) -> TrainConfig:
        return self._section(1)

    def extract(self) -> ExtractConfig:
        return self._section(2)

    def strands(self) -> GrowthConfig:
        return self._section(3)

    def invert(self) -> InvertConfig:
        return self._section(4)

    def sdf_sign(self) -> int:
        return int(self.get("render.sdf_sign"))

    def latents(self) -> list:
        """Training latents: the configured teacher, then prior draws seeded by index."""
        first = self.teacher()
        out = [first]
        for i in range(1, self.get_int("train.num_latents")):
            out.append(TeacherLatent.sample(np.random.default_rng(1000 + i)))
        return out

    def with_seed(self, seed: int) -> "Config":
        for key in ("train.seed", "strands.seed", "invert.seed"):
            self.items[key] = str(int(seed))
        return self
