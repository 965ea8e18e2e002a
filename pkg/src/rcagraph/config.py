"""Run configuration: one JSON document with a section per component.

::

    {"model": {...}, "crd": {...}, "train": {...}, "data": {...}, "scenario": {...}}

Missing keys take their defaults, unknown keys are rejected, and the resolved
document (every default filled in) is what gets written next to run outputs.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .crd import CRDConfig
from .errors import ConfigError
from .model import ModelConfig
from .pipeline import DataConfig, TrainConfig
from .simgen import ScenarioConfig

SECTIONS = {
    "model": ModelConfig,
    "crd": CRDConfig,
    "train": TrainConfig,
    "data": DataConfig,
    "scenario": ScenarioConfig,
}

# short names accepted by the sweep command
SWEEP_PARAMS = {
    "d_temp": "model.d_temp",
    "n_transformer_layers": "model.n_transformer_layers",
    "lambda1": "crd.lambda1",
    "lambda2": "crd.lambda2",
}


def _section_json(obj) -> dict:
    return obj.to_json() if hasattr(obj, "to_json") else asdict(obj)


def _build(cls, values: dict):
    names = {f.name for f in fields(cls)}
    unknown = set(values) - names
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    try:
        return cls(**values)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{cls.__name__}: {e}") from e


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    crd: CRDConfig = field(default_factory=CRDConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)

    @classmethod
    def from_json(cls, obj) -> "RunConfig":
        if not isinstance(obj, dict):
            raise ConfigError("run config must be a JSON object")
        unknown = set(obj) - set(SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        return cls(**{k: _build(SECTIONS[k], obj.get(k, {})) for k in SECTIONS})

    @classmethod
    def load(cls, path=None, overrides=()) -> "RunConfig":
        obj: dict = {}
        if path is not None:
            text = Path(path).read_text(encoding="utf-8")
            try:
                obj = json.loads(text)
            except json.JSONDecodeError as e:
                raise ConfigError(f"{path}:{e.lineno}:{e.colno}: {e.msg}") from e
        cfg = cls.from_json(obj)
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"override {item!r} is not of the form section.key=value")
            key, value = item.split("=", 1)
            cfg = cfg.set(key.strip(), parse_value(value))
        return cfg

    def set(self, dotted: str, value) -> "RunConfig":
        dotted = SWEEP_PARAMS.get(dotted, dotted)
        if "." not in dotted:
            raise ConfigError(f"config key {dotted!r} must be section.key")
        section, key = dotted.split(".", 1)
        if section not in SECTIONS:
            raise ConfigError(f"unknown config section {section!r}")
        current = _section_json(getattr(self, section))
        if key not in current:
            raise ConfigError(f"unknown key {key!r} in section {section!r}")
        current[key] = value
        return replace(self, **{section: _build(SECTIONS[section], current)})

    def with_seed(self, seed: int) -> "RunConfig":
        return (self.set("train.seed", seed).set("model.seed", seed).set("scenario.seed", seed))

    def to_json(self) -> dict:
        return {k: _section_json(getattr(self, k)) for k in SECTIONS}

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_json(), indent=2) + "\n", encoding="utf-8")
        return path


def parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text
