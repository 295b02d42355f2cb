"""``key = value`` run configuration files.

Keys are namespaced: ``scene.*`` and ``data.*`` feed the benchmark generator,
``train.*``, ``arch.*`` and ``aug.*`` the corresponding dataclasses.
``expand.max_dist`` is an alias for ``train.max_dist``. Unknown keys are
rejected.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, replace

from .synthgen import ConfigError, SceneConfig, default_config
from .trainer import TrainConfig


@dataclass
class SceneSpec:
    num_classes: int = 8
    image_size: tuple[int, int] = (64, 64)
    palette_divergence: float = 1.0
    rare_classes: tuple[int, ...] = (6, 7)
    rare_source_frequency: float = 0.01
    rare_target_frequency: float | None = None

    def build(self) -> SceneConfig:
        return default_config(**dataclasses.asdict(self))


@dataclass
class DataSpec:
    n_source: int = 96
    n_target: int = 96


@dataclass
class RunConfig:
    scene: SceneSpec = field(default_factory=SceneSpec)
    data: DataSpec = field(default_factory=DataSpec)
    train: TrainConfig = field(default_factory=TrainConfig)

    def train_config(self, seed: int | None = None) -> TrainConfig:
        cfg = self.train if seed is None else replace(self.train, seed=seed)
        return replace(cfg, arch=replace(cfg.arch, num_classes=self.scene.num_classes))


_NESTED = ("arch", "aug")
_ALIASES = {"expand.max_dist": "train.max_dist"}


def _coerce(raw: str, default, key: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            items = [s for s in raw.replace(",", " ").split() if s]
            kind = type(default[0]) if default else float
            return tuple(kind(s) for s in items)
        if default is None:
            if raw.lower() in ("none", ""):
                return None
            return int(raw) if raw.lstrip("-").isdigit() else float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r}") from None


def _set(obj, name: str, raw: str, key: str):
    fields = {f.name for f in dataclasses.fields(obj)}
    if name not in fields:
        raise ConfigError(f"unknown config key {key!r}")
    return replace(obj, **{name: _coerce(raw, getattr(obj, name), key)})


def parse_config(text: str) -> RunConfig:
    cfg = RunConfig()
    seen = set()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key in seen:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        seen.add(key)
        if _ALIASES.get(key) in seen:
            raise ConfigError(f"line {lineno}: {key!r} repeats {_ALIASES[key]!r}")
        seen.add(_ALIASES.get(key, key))
        section, _, name = _ALIASES.get(key, key).partition(".")
        if section == "scene" and name:
            cfg.scene = _set(cfg.scene, name, raw, key)
        elif section == "data" and name:
            cfg.data = _set(cfg.data, name, raw, key)
        elif section == "train" and name:
            if name in _NESTED:
                raise ConfigError(f"unknown config key {key!r}")
            cfg.train = _set(cfg.train, name, raw, key)
        elif section in _NESTED and name:
            sub = _set(getattr(cfg.train, section), name, raw, key)
            cfg.train = replace(cfg.train, **{section: sub})
        else:
            raise ConfigError(f"unknown config key {key!r}")
    try:
        cfg.train.validate()
        cfg.scene.build().validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def load_config(path) -> RunConfig:
    if path is None:
        return RunConfig()
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())

