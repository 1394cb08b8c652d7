"""Training configuration and JSON (de)serialization."""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

from .agent import AgentConfig
from .curriculum import LOOK_AT, CurriculumConfig
from .dvs import DvsConfig
from .latent import ModelConfig
from .sim import DEFAULT_WORKSPACE_DIMS, AugmentConfig


@dataclass(frozen=True)
class HandoffConfig:
    trans_tol: float = 0.03
    rot_tol: float = math.radians(2.0)
    max_rl_steps: int = 50

    def __post_init__(self):
        if not (self.trans_tol > 0 and self.rot_tol > 0):
            raise ValueError("handoff thresholds must be positive")


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    agent: AgentConfig = field(default_factory=AgentConfig)
    curriculum: CurriculumConfig = field(default_factory=CurriculumConfig)
    handoff: HandoffConfig = field(default_factory=HandoffConfig)
    steps_per_iteration: int = 200
    total_steps: int = 20000
    updates_per_step: int = 1
    model_update_every: int = 1
    learning_starts: int = 500
    model_pretrain_updates: int = 0
    horizon: int = 50
    replay_capacity: int = 20000
    lr_model: float = 3e-4
    model_grad_clip: float = 10.0
    goal_bonus: float = 10.0
    workspace_dims: tuple[float, float, float] = DEFAULT_WORKSPACE_DIMS
    scenarios: tuple[str, ...] = (LOOK_AT,)
    train_augment: AugmentConfig | None = None
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.steps_per_iteration < 1:
            raise ValueError("steps_per_iteration (M) must be >= 1")
        if self.horizon < 1 or self.total_steps < 0:
            raise ValueError("horizon must be >= 1 and total_steps >= 0")

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)


_NESTED = {
    "model": ModelConfig,
    "agent": AgentConfig,
    "curriculum": CurriculumConfig,
    "handoff": HandoffConfig,
    "train_augment": AugmentConfig,
}


def to_jsonable(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: to_jsonable(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    return obj


def _tuplify(v):
    if isinstance(v, list):
        return tuple(_tuplify(x) for x in v)
    return v


def _build(cls, d: dict):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**{k: _tuplify(v) for k, v in d.items()})


def train_config_from_dict(d: dict) -> TrainConfig:
    kw = {}
    for k, v in d.items():
        if k in _NESTED:
            kw[k] = None if v is None else _build(_NESTED[k], v)
        else:
            kw[k] = v
    return _build(TrainConfig, kw)


def merge(base: dict, override: dict) -> dict:
    """Recursive dict merge; ``override`` wins."""
    out = dict(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = merge(out[k], v)
        else:
            out[k] = v
    return out


def load_train_config(path=None, overrides: dict | None = None) -> TrainConfig:
    d = to_jsonable(TrainConfig())
    if path is not None:
        d = merge(d, json.loads(Path(path).read_text()))
    if overrides:
        d = merge(d, overrides)
    return train_config_from_dict(d)


def dvs_config_from_dict(d: dict | None) -> DvsConfig:
    return _build(DvsConfig, d or {})


def mini_config(seed: int = 0, total_steps: int = 10000) -> TrainConfig:
    """Desk-scale run: 64x64 images, look-at goals, first three curriculum stages.

    Short episodes, a low discount and two updates per step make the most of
    the ~1 h budget; the latent model is refreshed every 4th update.
    """
    return TrainConfig(
        seed=seed,
        model=ModelConfig(conv_channels=(8, 16, 16, 32), hidden=64),
        agent=AgentConfig(batch_size=64, gamma=0.9, init_alpha=1e-3),
        curriculum=CurriculumConfig(max_stage=2, eval_episodes=1),
        total_steps=total_steps,
        horizon=20,
        updates_per_step=2,
        model_update_every=4,
    )
