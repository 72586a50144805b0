"""Run configuration: one JSON document with world, user-model, env, agent and
eval sections plus a master seed that fans out to per-stage seeds."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import types
import typing
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .agent import AgentConfig
from .emtrainer import EmConfig
from .env import REWARD_MODES, EnvConfig
from .usermodel import AGGREGATORS
from .world import WorldConfig


class ConfigError(ValueError):
    """Validation failure, carrying the dotted path of the offending field."""

    def __init__(self, path: str, message: str):
        super().__init__(f"invalid config: {path}: {message}")
        self.path = path


def stage_seed(master: int, stage: str) -> int:
    """Stable 32-bit seed derived from (stage name, master seed)."""
    digest = hashlib.sha256(f"{stage}:{int(master)}".encode()).digest()
    return int.from_bytes(digest[:4], "big")


@dataclass
class UserSection:
    n_types: int = 4
    embed_dim: int = 8
    agg: str = "softmax_sample"
    n_pairwise: int = 20_000
    # comparisons per synthetic rater; each rater keeps one hidden type and one prompt
    comparisons_per_group: int = 20
    n_relevance: int = 0
    n_sequential: int = 0
    em: EmConfig = field(default_factory=lambda: EmConfig(main_steps=4000, target_period=20, n_restarts=4))

    def __post_init__(self):
        if self.agg not in AGGREGATORS:
            raise ValueError(f"unknown aggregator {self.agg!r}")
        if self.n_pairwise < 0 or self.n_relevance < 0 or self.n_sequential < 0:
            raise ValueError("dataset sizes must be >= 0")
        if self.n_pairwise + self.n_relevance + self.n_sequential == 0:
            raise ValueError("at least one dataset must be non-empty")
        if self.comparisons_per_group < 1:
            raise ValueError("comparisons_per_group must be >= 1")


@dataclass
class EnvSection:
    reward_mode: str = "sparse"
    # "learned" trains the agent in the fitted user model, "truth" in the planted world
    simulator: str = "learned"
    episode: EnvConfig = field(default_factory=EnvConfig)

    def __post_init__(self):
        if self.reward_mode not in REWARD_MODES:
            raise ValueError(f"reward_mode must be one of {REWARD_MODES}")
        if self.simulator not in ("learned", "truth"):
            raise ValueError("simulator must be 'learned' or 'truth'")


@dataclass
class AgentSection:
    n_trajectories: int = 2000
    iql: AgentConfig = field(default_factory=AgentConfig)

    def __post_init__(self):
        if self.n_trajectories < 1:
            raise ValueError("n_trajectories must be >= 1")


@dataclass
class EvalSection:
    n_episodes: int = 1000
    n_test_groups: int = 400
    test_pairs_per_group: int = 40
    n_ranked_lists: int = 400
    ranked_list_size: int = 9
    tie_threshold: float = 0.1
    identifiability_samples: int = 1000

    def __post_init__(self):
        if min(self.n_episodes, self.n_test_groups, self.n_ranked_lists, self.identifiability_samples) < 1:
            raise ValueError("evaluation sizes must be >= 1")
        if self.test_pairs_per_group < 2:
            raise ValueError("test_pairs_per_group must be >= 2 so both halves are non-empty")
        if self.ranked_list_size < 5:
            raise ValueError("ranked_list_size must be >= 5")


@dataclass
class RunConfig:
    seed: int = 0
    world: WorldConfig = field(default_factory=WorldConfig)
    user: UserSection = field(default_factory=UserSection)
    env: EnvSection = field(default_factory=EnvSection)
    agent: AgentSection = field(default_factory=AgentSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def __post_init__(self):
        if self.env.episode.n_categories != self.world.n_categories:
            raise ConfigError("env.episode.n_categories", "must equal world.n_categories")
        if self.user.em.n_types != self.user.n_types:
            raise ConfigError("user.em.n_types", "must equal user.n_types")

    def seed_for(self, stage: str) -> int:
        return stage_seed(self.seed, stage)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["world"] = self.world.to_dict()
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        return _build(cls, data, "")

    def with_overrides(self, overrides: dict) -> "RunConfig":
        """Apply dotted-path overrides such as ``{"env.reward_mode": "dense"}``."""
        d = self.to_dict()
        for key, value in overrides.items():
            node, parts = d, key.split(".")
            for p in parts[:-1]:
                if not isinstance(node.get(p), dict):
                    raise ConfigError(key, "unknown section")
                node = node[p]
            if parts[-1] not in node:
                raise ConfigError(key, "unknown field")
            node[parts[-1]] = value
        return RunConfig.from_dict(d)


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(str(path), f"not valid JSON ({exc.msg} at line {exc.lineno})") from exc
    if not isinstance(data, dict):
        raise ConfigError(str(path), "top level must be an object")
    return RunConfig.from_dict(data)


def _join(prefix: str, name: str) -> str:
    return f"{prefix}.{name}" if prefix else name


def _coerce(value, hint, path: str):
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if dataclasses.is_dataclass(hint):
        if not isinstance(value, dict):
            raise ConfigError(path, "expected an object")
        return _build(hint, value, path)
    if origin in (typing.Union, types.UnionType):
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(value, inner[0], path)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(path, "expected a list")
        return tuple(_coerce(v, args[0], path) for v in value)
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected true/false, got {value!r}")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected an integer, got {value!r}")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {value!r}")
        return value
    return value


def _build(cls, data: dict, prefix: str):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(_join(prefix, unknown[0]), "unknown field")
    kwargs = {k: _coerce(v, hints[k], _join(prefix, k)) for k, v in data.items()}
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(prefix or "<root>", str(exc)) from exc
