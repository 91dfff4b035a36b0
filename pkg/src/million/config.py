"""Run configuration read from an INI-style file.

The file has ``[run]``, ``[protocol]``, ``[policy]``, ``[learner]`` and
``[popart]`` sections of ``key = value`` lines. Unknown sections or keys are
rejected with the offending name. Data paths may be absolute, relative to the
config file, or ``builtin:<name>`` for files shipped with the package.
"""

from __future__ import annotations

import configparser
import dataclasses
import os
import typing
from dataclasses import dataclass, field

from .learner import LearnerConfig
from .lang import data_path
from .protocol import EpisodeConfig

VARIANTS = ("full", "no-popart", "no-instructions", "full-episode-time")


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""


@dataclass(frozen=True)
class RunSettings:
    seed: int = 0
    total_env_steps: int = 5_000_000
    eval_interval: int = 250_000
    eval_episodes: int = 8
    eval_average: int = 5
    checkpoint_interval: int = 250_000
    workers: int = 1
    suite: str = "builtin:suite.cfg"
    embeddings: str = "builtin:glove_desk.50d.txt"
    instructions: str = "builtin:instructions.txt"
    train_tasks: str = ""  # comma separated subset of the suite's train split
    variant: str = "full"


@dataclass(frozen=True)
class PolicySettings:
    layers: int = 2
    width: int = 64
    heads: int = 2
    memory_length: int = 0  # 0: the longest possible episode
    mlp_width: int = 128
    gate_bias: float = 2.0
    init_log_std: float = 0.0


@dataclass(frozen=True)
class PopArtSettings:
    beta: float = 3e-4
    sigma_floor: float = 1e-4
    enabled: bool = True


@dataclass(frozen=True)
class RunConfig:
    run: RunSettings = field(default_factory=RunSettings)
    protocol: EpisodeConfig = field(default_factory=EpisodeConfig)
    policy: PolicySettings = field(default_factory=PolicySettings)
    learner: LearnerConfig = field(default_factory=LearnerConfig)
    popart: PopArtSettings = field(default_factory=PopArtSettings)
    base_dir: str = "."

    def resolve(self, path: str) -> str:
        if path.startswith("builtin:"):
            return data_path(path[len("builtin:"):])
        if os.path.isabs(path):
            return path
        return os.path.normpath(os.path.join(self.base_dir, path))

    def with_variant(self, variant: str) -> "RunConfig":
        """The same run with one ablation applied."""
        if variant not in VARIANTS:
            raise ConfigError(f"variant: unknown variant {variant!r} (choose from {', '.join(VARIANTS)})")
        run = dataclasses.replace(self.run, variant=variant)
        proto, popart = self.protocol, self.popart
        if variant == "no-popart":
            popart = dataclasses.replace(popart, enabled=False)
        elif variant == "no-instructions":
            proto = dataclasses.replace(proto, use_instructions=False, reward_in_obs=True)
        elif variant == "full-episode-time":
            proto = dataclasses.replace(proto, time_mode="episode")
        return dataclasses.replace(self, run=run, protocol=proto, popart=popart)

    def to_ini(self) -> str:
        lines = []
        for section in SECTIONS:
            lines.append(f"[{section}]")
            obj = getattr(self, section)
            for f in dataclasses.fields(obj):
                value = getattr(obj, f.name)
                if value is None:
                    value = ""
                elif section == "run" and f.name in PATH_FIELDS and not value.startswith("builtin:"):
                    value = self.resolve(value)
                lines.append(f"{f.name} = {value}")
            lines.append("")
        return "\n".join(lines)


SECTIONS = ("run", "protocol", "policy", "learner", "popart")
PATH_FIELDS = ("suite", "embeddings", "instructions")


def _convert(section: str, name: str, kind, raw: str):
    raw = raw.strip()
    where = f"{section}.{name}"
    hints = typing.get_args(kind) or (kind,)
    if type(None) in hints:
        if raw == "" or raw.lower() == "none":
            return None
        kind = next(h for h in hints if h is not type(None))
    try:
        if kind is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError("expected a boolean")
        if kind is int:
            return int(float(raw)) if "e" in raw.lower() else int(raw.replace("_", ""))
        if kind is float:
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"{where}: bad value {raw!r} ({exc})") from None


def _build(section: str, cls, items: dict[str, str]):
    hints = typing.get_type_hints(cls)
    known = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, raw in items.items():
        if key not in known:
            raise ConfigError(f"{section}.{key}: unknown field")
        kwargs[key] = _convert(section, key, hints[key], raw)
    try:
        return cls(**kwargs)
    except ValueError as exc:
        raise ConfigError(f"{section}: {exc}") from None


def parse_config(text: str, base_dir: str = ".") -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"config syntax: {exc}") from None
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"{section}: unknown section")
    classes = {"run": RunSettings, "protocol": EpisodeConfig, "policy": PolicySettings,
               "learner": LearnerConfig, "popart": PopArtSettings}
    parts = {name: _build(name, cls, dict(parser[name]) if parser.has_section(name) else {})
             for name, cls in classes.items()}
    cfg = RunConfig(base_dir=base_dir, **parts)
    if cfg.run.variant not in VARIANTS:
        raise ConfigError(f"run.variant: unknown variant {cfg.run.variant!r}")
    for name in ("total_env_steps", "eval_interval", "eval_episodes", "eval_average", "checkpoint_interval",
                 "workers"):
        if getattr(cfg.run, name) < 1:
            raise ConfigError(f"run.{name}: must be >= 1")
    return cfg.with_variant(cfg.run.variant) if cfg.run.variant != "full" else cfg


def load_config(path: str | os.PathLike) -> RunConfig:
    """Read a run config; ``builtin:<name>`` loads a config shipped with the package."""
    path = str(path)
    if path.startswith("builtin:"):
        path = data_path(path[len("builtin:"):])
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"config: cannot read {path} ({exc.strerror})") from None
    return parse_config(text, base_dir=os.path.dirname(os.path.abspath(path)))
