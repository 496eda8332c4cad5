"""Run configuration: one flat ``section.key = value`` document over all dataclass configs.

Values are JSON literals (strings may be left unquoted). Unknown keys are
rejected, every value is coerced to the type of its default, and the resolved
document is written back next to each run's outputs.
"""

from __future__ import annotations

import json
from dataclasses import MISSING, dataclass, fields, replace
from pathlib import Path

from .audio import TOY_MEL, MelConfig, SyntheticCorpusSpec
from .bench import BenchConfig
from .conditioning import ConditioningConfig
from .diffusion import DenoiserConfig, ScheduleConfig, TeacherTrainConfig
from .discriminators import VWDConfig
from .distill import DistillConfig
from .errors import ConfigError
from .vocoder import VocoderConfig, VocoderTrainConfig

SCHEMA_VERSION = 1


@dataclass
class RunSection:
    schema_version: int = SCHEMA_VERSION
    seed: int = 0  # added to every stage seed (data, vocoder_train, teacher, trainer, bench, convert)
    threads: int = 1


@dataclass
class ConvertConfig:
    source: str = ""  # empty: first utterance of speaker 0 in the corpus
    target: str = ""  # empty: first utterance of speaker 1
    output: str = "converted.wav"
    seed: int = 0


@dataclass
class ArchConfig:
    all_depths: bool = False  # dump every L in 0..n_stages instead of trainer.vpfd_L


SECTIONS = {
    "run": (RunSection, {}),
    "data": (SyntheticCorpusSpec, {}),
    "mel": (MelConfig, TOY_MEL),
    "conditioning": (ConditioningConfig, {}),
    "vocoder": (VocoderConfig, {}),
    "vocoder_train": (VocoderTrainConfig, {}),
    "schedule": (ScheduleConfig, {}),
    "denoiser": (DenoiserConfig, {}),
    "teacher": (TeacherTrainConfig, {}),
    "trainer": (DistillConfig, {}),
    "vwd": (VWDConfig, {}),
    "bench": (BenchConfig, {}),
    "convert": (ConvertConfig, {}),
    "arch": (ArchConfig, {}),
}
SEEDED = ("data", "vocoder_train", "teacher", "trainer", "bench", "convert")


def _default(f, overrides):
    if f.name in overrides:
        return overrides[f.name]
    return f.default if f.default is not MISSING else f.default_factory()


def schema() -> dict:
    """``{"section.key": default}`` for every configurable key, in schema order."""
    out = {}
    for sec, (cls, over) in SECTIONS.items():
        for f in fields(cls):
            out[f"{sec}.{f.name}"] = _default(f, over)
    return out


def _to_tuple(v):
    return tuple(_to_tuple(x) for x in v) if isinstance(v, (list, tuple)) else v


def _jsonable(v):
    return [_jsonable(x) for x in v] if isinstance(v, (list, tuple)) else v


def format_value(v) -> str:
    return json.dumps(_jsonable(v))


def parse_value(key: str, raw: str, default):
    raw = raw.strip()
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = {"True": True, "False": False}.get(raw, raw)
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true/false, got {raw!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value:
            raise ConfigError(f"{key}: expected an integer, got {raw!r}")
        return int(value)
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {raw!r}")
        return float(value)
    if isinstance(default, str):
        return value if isinstance(value, str) else raw
    if isinstance(default, tuple):
        if not isinstance(value, list):
            raise ConfigError(f"{key}: expected a list, got {raw!r}")
        return _to_tuple(value)
    raise ConfigError(f"{key}: unsupported value type")  # pragma: no cover


class RunConfig:
    """Resolved configuration: one dataclass instance per section."""

    def __init__(self, values: dict | None = None):
        known = schema()
        merged = dict(known)
        for key, value in (values or {}).items():
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
            merged[key] = value
        self.sections = {}
        for sec, (cls, _) in SECTIONS.items():
            kw = {f.name: merged[f"{sec}.{f.name}"] for f in fields(cls)}
            try:
                self.sections[sec] = cls(**kw)
            except (ValueError, TypeError) as exc:
                raise ConfigError(f"invalid [{sec}] config: {exc}") from exc
        if self.run.schema_version != SCHEMA_VERSION:
            raise ConfigError(f"schema_version {self.run.schema_version} is not supported (expected {SCHEMA_VERSION})")

    def __getattr__(self, name):
        sections = self.__dict__.get("sections", {})
        if name in sections:
            return sections[name]
        raise AttributeError(name)

    def seeded(self, section: str):
        """Section config with the global seed added to its own."""
        cfg = self.sections[section]
        return replace(cfg, seed=cfg.seed + self.run.seed)

    def values(self) -> dict:
        return {f"{sec}.{f.name}": getattr(self.sections[sec], f.name) for sec, (cls, _) in SECTIONS.items() for f in fields(cls)}

    def dumps(self) -> str:
        lines = [f"# resolved run config (schema {SCHEMA_VERSION})"]
        for key, value in self.values().items():
            lines.append(f"{key} = {format_value(value)}")
        return "\n".join(lines) + "\n"

    def write(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.dumps())
        return path


def parse_text(text: str, source: str = "<config>") -> dict:
    known = schema()
    values = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise ConfigError(f"{source}:{n}: unknown config key {key!r}")
        values[key] = parse_value(key, raw, known[key])
    return values


def load_config(path=None, overrides=()) -> RunConfig:
    """File values, then ``key=value`` overrides in order."""
    values = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        values.update(parse_text(path.read_text(), str(path)))
    known = schema()
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        key = key.strip()
        if key not in known:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = parse_value(key, raw, known[key])
    return RunConfig(values)


def help_text() -> str:
    lines = ["config keys (default):"]
    lines += [f"  {key} = {format_value(value)}" for key, value in schema().items()]
    return "\n".join(lines)
