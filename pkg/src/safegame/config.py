"""JSON configuration files: environment, training, and experiment blocks.

A config file is a single JSON object with up to three sections:

    {"env": {...EnvSpec fields...},
     "model": "reduced" | "bicycle",
     "train": {...TrainConfig fields...},
     "experiment": {...ExperimentConfig fields...}}

Missing sections fall back to defaults; unknown keys are rejected so typos
fail loudly (exit code 2 at the CLI).
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

from .env import EnvSpec, make_car
from .train import TrainConfig


class ConfigError(Exception):
    """Malformed or inconsistent configuration."""


@dataclass
class ExperimentConfig:
    """Knobs of the evaluation protocols (sweep, filter comparison)."""

    n_rollouts: int = 100
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    d_max_list: list = field(default_factory=lambda: [0.0, 0.05, 0.1])
    filter_horizon: int = 50
    epsilon: float = 0.05
    n_hard_states: int = 100
    n_steps: int = 200
    ilqr_horizon: int = 15
    reference_speed: float = 1.0
    grid_shape: list = field(default_factory=lambda: [101, 25, 51])
    grid_gamma: float = 0.999

    @classmethod
    def from_dict(cls, d):
        return cls(**dict(d))

    def to_dict(self):
        return dataclasses.asdict(self)


@dataclass
class Config:
    env: EnvSpec
    model: str
    train: TrainConfig
    experiment: ExperimentConfig

    def make_car(self):
        return make_car(self.env, model=self.model)

    def to_dict(self):
        return {
            "env": json.loads(self.env.to_json()),
            "model": self.model,
            "train": self.train.to_dict(),
            "experiment": self.experiment.to_dict(),
        }


def _build_section(section_cls, payload, section):
    try:
        return section_cls.from_dict(payload)
    except TypeError as e:
        raise ConfigError(f"bad '{section}' section: {e}") from e
    except ValueError as e:
        raise ConfigError(f"invalid '{section}' values: {e}") from e


def config_from_dict(doc):
    if not isinstance(doc, dict):
        raise ConfigError("config root must be a JSON object")
    known = {"env", "model", "train", "experiment"}
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    model = doc.get("model", "reduced")
    if model not in ("reduced", "bicycle"):
        raise ConfigError(f"unknown model {model!r}")
    env = _build_section(EnvSpec, doc.get("env", {}), "env")
    train = _build_section(TrainConfig, doc.get("train", {}), "train")
    experiment = _build_section(ExperimentConfig, doc.get("experiment", {}),
                                "experiment")
    return Config(env=env, model=model, train=train, experiment=experiment)


def load_config(path):
    try:
        with open(path) as f:
            doc = json.load(f)
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {path} is not valid JSON: {e}") from e
    return config_from_dict(doc)


def default_config():
    return config_from_dict({})
