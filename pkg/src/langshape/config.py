"""Experiment configuration: one YAML file, every field optional.

Unknown keys are rejected so typos fail loudly.  ``config_hash`` is a short
digest of the fully resolved configuration, written into every output CSV.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .dataset import ConfigurationError
from .env import RoomLayout, builtin_layouts, load_layout
from .learnnet import ENCODER_MODES, LearnConfig
from .rl import PPOConfig
from .shaping import ShapingConfig

OUTPUT_ROOT_ENV = "LANGSHAPE_OUTPUT_ROOT"
DEFAULT_TEST_TASKS = ("r10_ladder_descent", "r11_left_then_down", "r12_right_up",
                      "r13_skull_jump_right", "r14_rope_left")


@dataclass
class DataConfig:
    clip_len: int = 40
    stride: int = 20
    trajectories_per_layout: int = 20
    trajectory_length: int = 400
    n_descriptions: int = 3
    typo_rate: float = 0.02
    n_train_pairs: int = 10_000
    n_val_pairs: int = 2_500
    embedding_dim: int = 50


@dataclass
class RLConfig:
    total_timesteps: int = 100_000
    eval_timesteps: int = 10_000
    n_seeds: int = 10
    n_descriptions: int = 3
    selection_seeds: int = 1
    selection_timesteps: int = 100_000
    ppo: PPOConfig = field(default_factory=PPOConfig)


@dataclass
class SensitivityConfig:
    task: str = "r10_ladder_descent"
    sigmas: tuple[float, ...] = (0.01, 0.05, 0.1, 0.5, 1.0)
    n_seeds: int = 10


@dataclass
class ExperimentConfig:
    master_seed: int = 0
    output_dir: str = "runs/default"
    layouts: list[str] = field(default_factory=list)      # empty = shipped rooms
    train_layouts: list[str] = field(default_factory=list)  # empty = every non-test room
    test_tasks: list[str] = field(default_factory=lambda: list(DEFAULT_TEST_TASKS))
    encoder_modes: list[str] = field(default_factory=lambda: list(ENCODER_MODES))
    lambdas: list[float] = field(default_factory=lambda: [0.1, 0.3, 1.0])
    workers: int = 1
    data: DataConfig = field(default_factory=DataConfig)
    learn: LearnConfig = field(default_factory=LearnConfig)
    shaping: ShapingConfig = field(default_factory=ShapingConfig)
    rl: RLConfig = field(default_factory=RLConfig)
    sensitivity: SensitivityConfig = field(default_factory=SensitivityConfig)
    source: str | None = None

    # -- derived ------------------------------------------------------------
    @property
    def out(self) -> Path:
        p = Path(self.output_dir)
        root = os.environ.get(OUTPUT_ROOT_ENV)
        return p if p.is_absolute() or not root else Path(root) / p

    def load_layouts(self) -> dict[str, RoomLayout]:
        if not self.layouts:
            rooms = builtin_layouts()
        else:
            rooms = []
            base = Path(self.source).parent if self.source else Path.cwd()
            for entry in self.layouts:
                path = Path(entry)
                if not path.is_absolute():
                    path = base / path
                if not path.exists():
                    raise ConfigurationError(f"layout file not found: {path}")
                rooms.append(load_layout(path))
        return {r.name: r for r in rooms}

    def split(self) -> tuple[list[str], list[str]]:
        layouts = self.load_layouts()
        names = sorted(layouts, key=lambda n: layouts[n].room_id)
        for t in self.test_tasks:
            if t not in names:
                raise ConfigurationError(f"test task {t!r} is not among the layouts")
        train = self.train_layouts or [n for n in names if n not in self.test_tasks]
        return train, list(self.test_tasks)

    def validate(self) -> None:
        if not self.encoder_modes or not self.lambdas:
            raise ConfigurationError("the hyperparameter grid (encoder_modes x lambdas) must be non-empty")
        for m in self.encoder_modes:
            if m not in ENCODER_MODES:
                raise ConfigurationError(f"unknown encoder mode {m!r}")
        if any(l < 0 for l in self.lambdas):
            raise ConfigurationError("lambda values must be >= 0")
        if self.rl.n_seeds < 1:
            raise ConfigurationError("rl.n_seeds must be >= 1")
        self.shaping.validate()
        self.split()

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d.pop("source")
        d["sensitivity"]["sigmas"] = list(d["sensitivity"]["sigmas"])
        return d

    def config_hash(self) -> str:
        # where results are written does not change what they are
        d = self.to_dict()
        d.pop("output_dir")
        blob = json.dumps(d, sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()[:12]


def _build(cls, data: dict | None, where: str):
    data = dict(data or {})
    kwargs = {}
    fields = {f.name: f for f in dataclasses.fields(cls)}
    for key, value in data.items():
        if key not in fields:
            raise ConfigurationError(f"unknown config key {where}{key}")
        sub = _NESTED.get((cls, key))
        if sub is not None:
            value = _build(sub, value, f"{where}{key}.")
        elif isinstance(value, list) and key == "sigmas":
            value = tuple(float(v) for v in value)
        kwargs[key] = value
    return cls(**kwargs)


_NESTED = {
    (ExperimentConfig, "data"): DataConfig,
    (ExperimentConfig, "learn"): LearnConfig,
    (ExperimentConfig, "shaping"): ShapingConfig,
    (ExperimentConfig, "rl"): RLConfig,
    (ExperimentConfig, "sensitivity"): SensitivityConfig,
    (RLConfig, "ppo"): PPOConfig,
}


def from_dict(data: dict | None, source: str | None = None) -> ExperimentConfig:
    cfg = _build(ExperimentConfig, data, "")
    cfg.source = source
    cfg.validate()
    return cfg


def load_config(path: str | Path | None) -> ExperimentConfig:
    """Read a YAML config; ``None`` gives the defaults."""
    if path is None:
        return from_dict({})
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"config file not found: {path}")
    with open(path, encoding="utf-8") as fh:
        data = yaml.safe_load(fh) or {}
    if not isinstance(data, dict):
        raise ConfigurationError(f"{path}: top level must be a mapping")
    return from_dict(data, str(path))


def with_overrides(cfg: ExperimentConfig, **changes) -> ExperimentConfig:
    """Copy of ``cfg`` with top-level fields replaced (``None`` values ignored)."""
    changes = {k: v for k, v in changes.items() if v is not None}
    new = dataclasses.replace(cfg, **changes)
    new.validate()
    return new
