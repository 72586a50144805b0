"""Latent-type slate environment: episodes, rollouts, offline trajectory files and
identifiability diagnostics.

A simulator owns the hidden user side. ``TruthSimulator`` uses the planted
ground-truth users; ``LearnedSimulator`` uses a fitted :class:`UserModel`.
Both share the world's non-personalized item generator and score every item
against the episode's initial prompt.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .candidates import BudgetSchedule, CandidateSet, generate_candidates, word_budget
from .datasets import parallel_map, read_jsonl, stream_rng, write_jsonl
from .selection import InfeasibleSlateError, random_policy
from .usermodel import UserModel
from .world import Prompt, World, sample_prompt

REWARD_MODES = ("sparse", "dense")
STREAM_ROLLOUT = 21
STREAM_IDENTIFY = 22


class InvalidSlateError(ValueError):
    pass


class EpisodeDoneError(RuntimeError):
    pass


@dataclass(frozen=True)
class EnvConfig:
    horizon: int = 5
    slate_size: int = 4
    items_per_prompt: int = 4
    n_candidates: int = 25
    n_categories: int = 5
    budget_mode: str = "linear"

    def __post_init__(self):
        if self.horizon < 1 or self.items_per_prompt < 1:
            raise ValueError("horizon and items_per_prompt must be positive")
        if self.slate_size < 2:
            raise ValueError("a slate needs at least two prompts")
        if self.slate_size > self.n_categories:
            raise ValueError("slate_size cannot exceed n_categories under the one-per-category rule")
        if self.n_candidates < self.n_categories:
            raise ValueError("need at least one candidate per category")


# ---------------------------------------------------------------------------
# simulators
# ---------------------------------------------------------------------------

class Simulator:
    """Hidden-user side of the environment."""

    world: World

    @property
    def n_types(self) -> int:
        raise NotImplementedError

    @property
    def type_prior(self) -> np.ndarray:
        raise NotImplementedError

    def all_utilities(self, p0: Prompt, items: np.ndarray) -> np.ndarray:
        """Column utilities ``(K, L)`` for items ``(L, M, item_dim)``."""
        raise NotImplementedError

    def all_choice_probs(self, p0: Prompt, items: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def describe(self) -> dict:
        raise NotImplementedError

    def utilities(self, k: int, p0: Prompt, items: np.ndarray) -> np.ndarray:
        return self.all_utilities(p0, items)[k]

    def choice_probs(self, k: int, p0: Prompt, items: np.ndarray) -> np.ndarray:
        return self.all_choice_probs(p0, items)[k]


class TruthSimulator(Simulator):
    def __init__(self, world: World):
        self.world = world

    @property
    def n_types(self) -> int:
        return self.world.n_types

    @property
    def type_prior(self) -> np.ndarray:
        return self.world.initial.type_prior

    def all_utilities(self, p0, items):
        return np.stack([self.world.column_utilities(k, p0, items) for k in range(self.n_types)])

    def all_choice_probs(self, p0, items):
        return np.stack([self.world.choice_probs(k, p0, items) for k in range(self.n_types)])

    def describe(self) -> dict:
        return {"simulator": "truth", "world_seed": int(self.world.seed)}


class LearnedSimulator(Simulator):
    def __init__(self, world: World, model: UserModel):
        self.world, self.model = world, model

    @property
    def n_types(self) -> int:
        return self.model.n_types

    @property
    def type_prior(self) -> np.ndarray:
        return self.model.prior

    def all_utilities(self, p0, items):
        return self.model.utilities(self.world.embed(p0), items)

    def all_choice_probs(self, p0, items):
        return self.model.choice_probs_from_utilities(self.all_utilities(p0, items))

    def describe(self) -> dict:
        blob = json.dumps(self.model.to_dict(), sort_keys=True).encode()
        return {"simulator": "learned", "world_seed": int(self.world.seed),
                "user_model_sha256": hashlib.sha256(blob).hexdigest()}


# ---------------------------------------------------------------------------
# episode state
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TurnRecord:
    slate: tuple[Prompt, ...]
    items: np.ndarray  # (L, M, item_dim)
    choice: int


@dataclass(frozen=True)
class History:
    p0: Prompt
    turns: tuple[TurnRecord, ...] = ()

    @property
    def t(self) -> int:
        return len(self.turns)

    @property
    def chosen_prompts(self) -> list[Prompt]:
        return [tr.slate[tr.choice] for tr in self.turns]

    @property
    def current_prompt(self) -> Prompt:
        return self.turns[-1].slate[self.turns[-1].choice] if self.turns else self.p0

    def extend(self, record: TurnRecord) -> "History":
        return History(self.p0, self.turns + (record,))


@dataclass(frozen=True)
class EpisodeState:
    history: History
    hidden_type: int
    done: bool = False

    @property
    def chosen_prompt(self) -> Prompt:
        return self.history.current_prompt


@dataclass
class TrajectoryTurn:
    candidates: CandidateSet
    slate_indices: list[int]
    items: np.ndarray
    choice: int
    reward: float

    @property
    def slate(self) -> tuple[Prompt, ...]:
        return tuple(self.candidates.prompts[i] for i in self.slate_indices)

    def to_json(self) -> dict:
        return {"candidates": self.candidates.to_record(), "slate": list(self.slate_indices),
                "items": self.items.tolist(), "choice": self.choice, "reward": self.reward}


@dataclass
class Trajectory:
    episode_id: int
    p0: Prompt
    turns: list[TrajectoryTurn]
    reward_mode: str
    hidden_type: int | None = field(default=None, repr=False)

    @property
    def total_return(self) -> float:
        return float(sum(t.reward for t in self.turns))

    def history_at(self, t: int) -> History:
        """History before turn ``t`` (0-based)."""
        return History(self.p0, tuple(TurnRecord(tr.slate, tr.items, tr.choice) for tr in self.turns[:t]))

    def to_json(self) -> dict:
        # the hidden type is deliberately not serialized
        return {"episode_id": self.episode_id, "p0": list(self.p0), "reward_mode": self.reward_mode,
                "turns": [t.to_json() for t in self.turns], "return": self.total_return}

    @classmethod
    def from_json(cls, d: dict) -> "Trajectory":
        turns, base = [], tuple(d["p0"])
        for rec in d["turns"]:
            cands = CandidateSet.from_record(base, rec["candidates"])
            tt = TrajectoryTurn(cands, [int(i) for i in rec["slate"]], np.asarray(rec["items"], dtype=float),
                                int(rec["choice"]), float(rec["reward"]))
            turns.append(tt)
            base = tt.slate[tt.choice]
        return cls(int(d["episode_id"]), tuple(d["p0"]), turns, d["reward_mode"])


# ---------------------------------------------------------------------------
# the environment
# ---------------------------------------------------------------------------

class SlateEnv:
    def __init__(self, simulator: Simulator, config: EnvConfig | None = None):
        self.simulator = simulator
        self.config = config or EnvConfig()
        self.world = simulator.world
        if self.config.n_categories > self.world.vocab.n_categories:
            raise ValueError("environment uses more categories than the vocabulary has")

    def schedule(self, p0: Prompt) -> BudgetSchedule:
        return BudgetSchedule(min(len(p0), self.world.config.max_words), self.world.config.max_words,
                              self.config.horizon, self.config.budget_mode)

    def budget(self, history: History) -> int:
        """Word limit for prompts shown at the next turn."""
        return word_budget(self.schedule(history.p0), min(history.t + 1, self.config.horizon))

    def reset(self, rng: np.random.Generator) -> EpisodeState:
        prior = self.simulator.type_prior
        k = int(rng.choice(len(prior), p=prior))
        p0 = sample_prompt(self.world.initial, rng)
        return EpisodeState(History(p0), k)

    def candidates(self, state: EpisodeState, rng: np.random.Generator) -> CandidateSet:
        c = self.config
        return generate_candidates(state.chosen_prompt, self.world.vocab, self.budget(state.history),
                                   c.n_candidates, rng, c.n_categories)

    def step(self, state: EpisodeState, slate, rng: np.random.Generator,
             reward_mode: str = "sparse") -> tuple[EpisodeState, int, float]:
        if state.done:
            raise EpisodeDoneError("episode already finished")
        if reward_mode not in REWARD_MODES:
            raise ValueError(f"unknown reward mode {reward_mode!r}")
        slate = tuple(self.world.vocab.validate(p) for p in slate)
        if len(slate) != self.config.slate_size:
            raise InvalidSlateError(f"slate has {len(slate)} prompts, expected {self.config.slate_size}")
        limit = self.budget(state.history)
        if any(len(p) > max(limit, len(state.chosen_prompt)) for p in slate):
            raise InvalidSlateError(f"prompt exceeds the word budget of {limit}")
        items = np.stack([self.world.items(p, self.config.items_per_prompt, rng) for p in slate])
        p0 = state.history.p0
        probs = self.simulator.choice_probs(state.hidden_type, p0, items)
        choice = int(rng.choice(len(slate), p=probs))
        history = state.history.extend(TurnRecord(slate, items, choice))
        done = history.t >= self.config.horizon
        utility = float(self.simulator.utilities(state.hidden_type, p0, items)[choice])
        reward = utility if (reward_mode == "dense" or done) else 0.0
        return EpisodeState(history, state.hidden_type, done), choice, reward


# ---------------------------------------------------------------------------
# policies and rollouts
# ---------------------------------------------------------------------------

class RandomPolicy:
    """Uniform over category-feasible slates; ignores the history."""

    name = "random"

    def select(self, history: History, candidates: CandidateSet, n_slate: int,
               rng: np.random.Generator) -> list[int]:
        return random_policy(candidates, n_slate, rng)


def check_slate(indices, candidates: CandidateSet, n_slate: int) -> list[int]:
    idx = [int(i) for i in indices]
    if len(idx) != n_slate or len(set(idx)) != n_slate:
        raise InvalidSlateError(f"need {n_slate} distinct candidates, got {idx}")
    if any(not 0 <= i < len(candidates) for i in idx):
        raise InvalidSlateError("candidate index out of range")
    if len({candidates.categories[i] for i in idx}) != n_slate:
        raise InvalidSlateError("at most one prompt per category")
    return idx


def rollout(policy, env: SlateEnv, rng: np.random.Generator, reward_mode: str = "sparse",
            episode_id: int = 0) -> Trajectory:
    """One episode. Environment and policy randomness come from separate child
    streams, so every policy meets the same users and initial prompts."""
    env_rng, pol_rng = rng.spawn(2)
    state = env.reset(env_rng)
    turns = []
    while not state.done:
        cands = env.candidates(state, env_rng)
        try:
            idx = check_slate(policy.select(state.history, cands, env.config.slate_size, pol_rng),
                              cands, env.config.slate_size)
        except (InvalidSlateError, InfeasibleSlateError) as exc:
            raise InvalidSlateError(f"turn {state.history.t + 1}: {exc}") from exc
        slate = tuple(cands.prompts[i] for i in idx)
        state, choice, reward = env.step(state, slate, env_rng, reward_mode)
        turns.append(TrajectoryTurn(cands, idx, state.history.turns[-1].items, choice, reward))
    return Trajectory(episode_id, state.history.p0, turns, reward_mode, state.hidden_type)


def generate_offline_dataset(env: SlateEnv, n_trajectories: int, reward_mode: str, seed: int,
                             policy=None, n_jobs: int = 1) -> list[Trajectory]:
    if n_trajectories < 1:
        raise ValueError("n_trajectories must be >= 1")
    policy = policy or RandomPolicy()
    return parallel_map(lambda i: rollout(policy, env, stream_rng(seed, STREAM_ROLLOUT, i), reward_mode, i),
                        n_trajectories, n_jobs)


def trajectory_header(env: SlateEnv, reward_mode: str, seed: int, n: int) -> dict:
    return {"dataset": "trajectories", "reward_mode": reward_mode, "seed": int(seed), "n_trajectories": n,
            "env": env.config.__dict__.copy(), **env.simulator.describe()}


def save_trajectories(path, trajectories: list[Trajectory], header: dict) -> None:
    try:
        write_jsonl(path, header, (t.to_json() for t in trajectories))
    except (OSError, TypeError, ValueError) as exc:
        raise OSError(f"failed writing trajectories to {path}: {exc}") from exc


def load_trajectories(path) -> tuple[dict, list[Trajectory]]:
    header, rows = read_jsonl(path)
    if header.get("dataset") != "trajectories":
        raise ValueError(f"{path}: not a trajectory file")
    out = []
    for i, row in enumerate(rows):
        try:
            out.append(Trajectory.from_json(row))
        except (KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"{path}: malformed trajectory {i}: {exc}") from exc
    return header, out


# ---------------------------------------------------------------------------
# identifiability
# ---------------------------------------------------------------------------

@dataclass
class IdentifiabilityReport:
    identified: np.ndarray  # (K, K) bool
    witness: np.ndarray  # (K, K) int, -1 where no identifying slate was found
    merged: list[list[int]]
    n_samples: int

    def to_json(self) -> dict:
        return {"kind": "identifiability", "identified": self.identified.tolist(),
                "witness": self.witness.tolist(), "merged": self.merged, "n_samples": self.n_samples}


def sample_collection_slate(env: SlateEnv, rng: np.random.Generator) -> tuple[Prompt, np.ndarray]:
    """First-turn slate drawn the way the offline data is collected."""
    state = env.reset(rng)
    cands = env.candidates(state, rng)
    idx = random_policy(cands, env.config.slate_size, rng)
    items = np.stack([env.world.items(cands.prompts[i], env.config.items_per_prompt, rng) for i in idx])
    return state.history.p0, items


def _merge_groups(k: int, ambiguous: list[tuple[int, int]]) -> list[list[int]]:
    parent = list(range(k))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for i, j in ambiguous:
        parent[find(i)] = find(j)
    groups: dict[int, list[int]] = {}
    for x in range(k):
        groups.setdefault(find(x), []).append(x)
    return sorted(g for g in groups.values() if len(g) > 1)


def identifiability_check(env: SlateEnv, n_samples: int = 1000, seed: int = 0, tol_utility: float = 1e-3,
                          tol_choice: float = 1e-3, sampler=None) -> IdentifiabilityReport:
    """Search sampled slates for one separating each pair of types.

    A slate separates types i and j when some column utility differs by more
    than ``tol_utility`` or the choice distributions differ in total variation
    by more than ``tol_choice``. Pairs without a witness are merged transitively.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    sampler = sampler or sample_collection_slate
    sim = env.simulator
    k = sim.n_types
    witness = np.full((k, k), -1, dtype=int)
    np.fill_diagonal(witness, 0)
    open_pairs = {(i, j) for i in range(k) for j in range(i + 1, k)}
    for s in range(n_samples):
        if not open_pairs:
            break
        p0, items = sampler(env, stream_rng(seed, STREAM_IDENTIFY, s))
        r = sim.all_utilities(p0, items)
        c = sim.all_choice_probs(p0, items)
        for i, j in sorted(open_pairs):
            if np.max(np.abs(r[i] - r[j])) > tol_utility or 0.5 * np.sum(np.abs(c[i] - c[j])) > tol_choice:
                witness[i, j] = witness[j, i] = s
                open_pairs.discard((i, j))
    identified = witness >= 0
    np.fill_diagonal(identified, True)
    return IdentifiabilityReport(identified, witness, _merge_groups(k, sorted(open_pairs)), n_samples)
