"""Run configuration files: INI sections mapped onto the module configs.

A run config is plain text with one section per subsystem; every key has a
default, so the empty file is a valid config. Values are type-checked
against the owning dataclass and rejected with the offending section.key,
never silently ignored — a typo'd key must not produce a differently
configured run. The resolved config has a stable digest that producing
commands stamp into their artifacts.
"""

from __future__ import annotations

import configparser
import types
import typing
from dataclasses import asdict, dataclass, fields

from . import cluster as cl
from . import embed as em
from . import fileio
from . import membank as mb
from . import model as mdl
from . import train as tr


class ConfigError(ValueError):
    """Unknown section/key or unparseable/invalid value in a run config."""


@dataclass(frozen=True)
class EvalConfig:
    max_new: int = 8
    batch_size: int = 64
    n_buckets: int = 5

    def __post_init__(self):
        if self.max_new < 1 or self.batch_size < 1 or self.n_buckets < 1:
            raise ValueError("eval sizes must be positive")


_SECTIONS = {
    "embedder": em.EmbedderConfig,
    "cluster": cl.ClusterConfig,
    "anchor": mdl.AnchorConfig,
    "memory": mb.MemoryConfig,
    "train": tr.TrainConfig,
    "eval": EvalConfig,
}
_RUN_KEYS = ("seed", "out")


@dataclass(frozen=True)
class RunConfig:
    embedder: em.EmbedderConfig = em.EmbedderConfig()
    cluster: cl.ClusterConfig = cl.ClusterConfig()
    anchor: mdl.AnchorConfig = mdl.AnchorConfig()
    memory: mb.MemoryConfig = mb.MemoryConfig()
    train: tr.TrainConfig = tr.TrainConfig()
    eval: EvalConfig = EvalConfig()
    seed: int = 0
    out: str = "runs"

    def as_dict(self) -> dict:
        d = {name: asdict(getattr(self, name)) for name in _SECTIONS}
        d["run"] = {"seed": self.seed, "out": self.out}
        return d

    @property
    def digest(self) -> str:
        # the digest names the settings that determine artifact bytes; where
        # those bytes land is not one of them
        d = self.as_dict()
        d["run"] = {"seed": self.seed}
        return fileio.digest_of(d)


def _convert(hint, raw: str, where: str):
    raw = raw.strip()
    origin = typing.get_origin(hint)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(hint) if a is not type(None)]
        if raw.lower() in ("none", ""):
            return None
        return _convert(args[0], raw, where)
    try:
        if hint is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if hint is int:
            return int(raw)
        if hint is float:
            return float(raw)
        if hint is str:
            return raw
        if origin is tuple:
            item = typing.get_args(hint)[0]
            parts = raw.replace(",", " ").split()
            return tuple(_convert(item, p, where) for p in parts)
    except ValueError as e:
        raise ConfigError(f"{where}: {e}") from None
    raise ConfigError(f"{where}: unsupported config type {hint}")


def _parse_section(cls, section: str, items: dict) -> object:
    hints = typing.get_type_hints(cls)
    known = {f.name for f in fields(cls)}
    kwargs = {}
    for key, raw in items.items():
        if key not in known:
            raise ConfigError(f"[{section}] has no key {key!r}")
        kwargs[key] = _convert(hints[key], raw, f"[{section}] {key}")
    try:
        return cls(**kwargs)
    except ValueError as e:
        raise ConfigError(f"[{section}] {e}") from None


def load_config(path=None, *, seed: int | None = None, out: str | None = None) -> RunConfig:
    """Parse an INI run config; flag overrides beat file values.

    ``path=None`` yields the all-defaults config, so every command works
    without a file.
    """
    parser = configparser.ConfigParser(interpolation=None)
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                parser.read_file(fh)
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from None
        except configparser.Error as e:
            raise ConfigError(f"{path}: {e}") from None

    kwargs: dict = {}
    for section in parser.sections():
        if section == "run":
            for key, raw in parser["run"].items():
                if key not in _RUN_KEYS:
                    raise ConfigError(f"[run] has no key {key!r}")
                kwargs[key] = _convert(int if key == "seed" else str, raw, f"[run] {key}")
            continue
        cls = _SECTIONS.get(section)
        if cls is None:
            raise ConfigError(f"unknown section [{section}]")
        kwargs[section] = _parse_section(cls, section, dict(parser[section]))

    if seed is not None:
        kwargs["seed"] = seed
    if out is not None:
        kwargs["out"] = out
    return RunConfig(**kwargs)
