"""Run configuration: typed sections, JSON config files and flat CLI flags.

Precedence is flags > config file > defaults. Config files are JSON objects
whose keys are either section names holding objects (``{"trainer": {"lr": 0.5}}``)
or top-level run keys (``{"seed": 3}``). Unknown keys are errors.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, get_type_hints

from .rewards import RewardConfig
from .sandbox import SandboxConfig
from .synth.pipeline import SynthConfig
from .toolkit import BudgetConfig
from .trainer import ALGOS, TrainerConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunSettings:
    seed: int = 0
    out_dir: str = "out"
    algo: str = "composite"
    count: int = 200
    corpus: str = ""
    policy: str = ""
    threshold: float = 0.45


SECTIONS: dict[str, type] = {
    "run": RunSettings,
    "sandbox": SandboxConfig,
    "budget": BudgetConfig,
    "reward": RewardConfig,
    "trainer": TrainerConfig,
    "synth": SynthConfig,
}


@dataclass(frozen=True)
class RunConfig:
    run: RunSettings = field(default_factory=RunSettings)
    sandbox: SandboxConfig = field(default_factory=SandboxConfig)
    budget: BudgetConfig = field(default_factory=BudgetConfig)
    reward: RewardConfig = field(default_factory=RewardConfig)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)

    def validate(self) -> None:
        if self.run.algo not in ALGOS:
            raise ConfigError(f"algo must be one of {', '.join(ALGOS)}, got {self.run.algo!r}")
        if self.run.count < 1:
            raise ConfigError(f"count must be >= 1, got {self.run.count}")
        for name in ("sandbox", "reward", "trainer", "synth"):
            try:
                getattr(self, name).validate()
            except ValueError as err:
                raise ConfigError(f"{name}: {err}") from None
        b = self.budget
        if min(b.total_budget, b.frame_tokens, b.browse_frame_tokens, b.initial_frames, b.max_frames) < 1:
            raise ConfigError("budget: all budget fields must be >= 1")

    @property
    def out(self) -> Path:
        return Path(self.run.out_dir)

    @property
    def corpus_path(self) -> Path:
        return Path(self.run.corpus) if self.run.corpus else self.out / "corpus.jsonl"

    def to_json(self) -> dict[str, Any]:
        return {name: dataclasses.asdict(getattr(self, name)) for name in SECTIONS}


def config_keys() -> list[tuple[str, str, type, Any]]:
    """Every (section, key, type, default) in declaration order."""
    out = []
    for section, cls in SECTIONS.items():
        hints = get_type_hints(cls)
        for f in fields(cls):
            out.append((section, f.name, hints[f.name], f.default))
    return out


def flag_name(key: str) -> str:
    return "--" + key.replace("_", "-")


def _coerce(section: str, key: str, typ: type, value: Any) -> Any:
    where = f"{section}.{key}"
    if typ is bool:
        if isinstance(value, bool):
            return value
        raise ConfigError(f"{where} must be true or false, got {value!r}")
    if typ is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where} must be an integer, got {value!r}")
        return value
    if typ is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where} must be a number, got {value!r}")
        return float(value)
    if not isinstance(value, str):
        raise ConfigError(f"{where} must be a string, got {value!r}")
    return value


def _key_index() -> dict[str, tuple[str, type]]:
    return {key: (section, typ) for section, key, typ, _ in config_keys()}


def file_overrides(data: Any) -> dict[tuple[str, str], Any]:
    """Flatten a parsed config file into {(section, key): value}, rejecting unknown keys."""
    if not isinstance(data, dict):
        raise ConfigError("config file must hold a JSON object")
    index = _key_index()
    out: dict[tuple[str, str], Any] = {}
    for top, value in data.items():
        if top in SECTIONS and top != "run":
            if not isinstance(value, dict):
                raise ConfigError(f"section {top!r} must be an object")
            allowed = {f.name: f for f in fields(SECTIONS[top])}
            hints = get_type_hints(SECTIONS[top])
            for key, v in value.items():
                if key not in allowed:
                    raise ConfigError(f"unknown key {top}.{key}")
                out[(top, key)] = _coerce(top, key, hints[key], v)
        elif top == "run" and isinstance(value, dict):
            for key, v in value.items():
                if key not in {f.name for f in fields(RunSettings)}:
                    raise ConfigError(f"unknown key run.{key}")
                out[("run", key)] = _coerce("run", key, index[key][1], v)
        elif top in index and index[top][0] == "run":
            out[("run", top)] = _coerce("run", top, index[top][1], value)
        else:
            raise ConfigError(f"unknown key {top!r}")
    return out


def load_config_file(path: str | Path) -> dict[tuple[str, str], Any]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as err:
        raise ConfigError(f"cannot read config file {path}: {err.strerror}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as err:
        raise ConfigError(f"config file {path} is not valid JSON: {err}") from None
    return file_overrides(data)


def build_config(*layers: dict[tuple[str, str], Any]) -> RunConfig:
    """Apply override layers in order (later wins) on top of the defaults."""
    merged: dict[str, dict[str, Any]] = {s: {} for s in SECTIONS}
    for layer in layers:
        for (section, key), value in layer.items():
            merged[section][key] = value
    cfg = RunConfig(**{s: SECTIONS[s](**merged[s]) for s in SECTIONS})
    cfg.validate()
    return cfg
