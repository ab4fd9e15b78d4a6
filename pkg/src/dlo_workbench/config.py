"""
Workbench configuration.

A config file is a list of `section.key = value` lines; `#` starts a
comment. Sections: material, scenario, agent, train, evaluation, goaldb,
experiment, plus the top-level `seed`. Tuples are comma-separated,
booleans are true/false, `none` clears an optional value.
"""

from __future__ import annotations

import dataclasses
import hashlib
import os
from dataclasses import dataclass, field
from pathlib import Path

from .agent import AgentConfig
from .errors import ConfigError
from .evalharness import EvalConfig, ExperimentConfig
from .goaldb import GoalDbSettings
from .scenario import ScenarioSettings
from .softbody import MaterialParams
from .trainer import TrainConfig

# Configuration
DATA_DIR = Path(os.environ.get("DLO_WORKBENCH_DATA", "data"))
RUNS_DIR = DATA_DIR / "runs"

# Fields supplied from elsewhere (the global seed, the agent section).
_EXCLUDED = {
    "train": {"seed", "agent"},
    "evaluation": {"seed"},
}

_TRUE = {"true", "yes", "on", "1"}
_FALSE = {"false", "no", "off", "0"}


@dataclass(frozen=True)
class WorkbenchConfig:
    seed: int = 0
    material: MaterialParams = field(default_factory=MaterialParams)
    scenario: ScenarioSettings = field(default_factory=ScenarioSettings)
    agent: AgentConfig = field(default_factory=AgentConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    evaluation: EvalConfig = field(default_factory=EvalConfig)
    goaldb: GoalDbSettings = field(default_factory=GoalDbSettings)
    experiment: ExperimentConfig = field(default_factory=ExperimentConfig)

    def train_config(self) -> TrainConfig:
        """Training section with the global seed and the agent section folded in."""
        return dataclasses.replace(self.train, seed=self.seed, agent=self.agent)

    def eval_config(self) -> EvalConfig:
        return dataclasses.replace(self.evaluation, seed=self.seed)


SECTIONS = ("material", "scenario", "agent", "train", "evaluation", "goaldb", "experiment")


def _section_fields(section: str):
    cls = type(getattr(WorkbenchConfig(), section))
    return {
        f.name: f for f in dataclasses.fields(cls)
        if f.name not in _EXCLUDED.get(section, set())
    }


# ============================================================
# Value coercion
# ============================================================

def _scalar(kind: str, raw: str):
    if kind == "bool":
        lowered = raw.lower()
        if lowered in _TRUE:
            return True
        if lowered in _FALSE:
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    return raw


def coerce(annotation: str, raw: str):
    """Convert a raw string according to a dataclass field annotation."""
    raw = raw.strip()
    optional = "None" in annotation
    if optional and raw.lower() in ("none", ""):
        return None
    base = annotation.replace("| None", "").strip()
    if base.startswith("tuple"):
        kind = next((k for k in ("float", "bool", "str") if k in base), "int")
        return tuple(_scalar(kind, part.strip()) for part in raw.split(",") if part.strip())
    if base not in ("bool", "int", "float"):
        base = "str"
    return _scalar(base, raw)


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(_format(v) for v in value)
    return str(value)


# ============================================================
# Parsing and dumping
# ============================================================

def apply_overrides(config: WorkbenchConfig, overrides: dict[str, str]) -> WorkbenchConfig:
    """
    Apply `section.key -> raw string` overrides.

    Raises:
        ConfigError: unknown key or a value that cannot be converted
    """
    changes: dict[str, dict] = {}
    seed = config.seed
    for key, raw in overrides.items():
        if key == "seed":
            try:
                seed = int(str(raw).strip())
            except ValueError as exc:
                raise ConfigError(f"seed must be an integer, got {raw!r}") from exc
            continue
        section, _, name = key.partition(".")
        if section not in SECTIONS or not name:
            raise ConfigError(f"unknown config key {key!r}")
        fields_ = _section_fields(section)
        if name not in fields_:
            raise ConfigError(f"unknown config key {key!r}")
        try:
            value = coerce(str(fields_[name].type), str(raw))
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {exc}") from exc
        changes.setdefault(section, {})[name] = value

    updated = {}
    for section, values in changes.items():
        try:
            updated[section] = dataclasses.replace(getattr(config, section), **values)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid [{section}] settings: {exc}") from exc
    return dataclasses.replace(config, seed=seed, **updated)


def parse_config(text: str, base: WorkbenchConfig | None = None) -> WorkbenchConfig:
    overrides = {}
    for number, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"line {number}: expected 'key = value', got {line!r}")
        overrides[key.strip()] = value.strip()
    return apply_overrides(base or WorkbenchConfig(), overrides)


def load_config(path: str | Path | None = None) -> WorkbenchConfig:
    """Defaults when path is None; otherwise the file applied over the defaults."""
    if path is None:
        return WorkbenchConfig()
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(path.read_text())


def dump_config(config: WorkbenchConfig) -> str:
    """Canonical `key = value` text; parse_config(dump_config(c)) == c."""
    lines = [f"seed = {config.seed}"]
    for section in SECTIONS:
        values = getattr(config, section)
        for name in _section_fields(section):
            lines.append(f"{section}.{name} = {_format(getattr(values, name))}")
    return "\n".join(lines) + "\n"


def config_hash(config: WorkbenchConfig) -> str:
    return hashlib.sha256(dump_config(config).encode()).hexdigest()
