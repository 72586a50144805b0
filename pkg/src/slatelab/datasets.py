"""Labeled dataset synthesis (pairwise, relevance, sequential) and line-delimited JSON IO.

Every record is drawn from its own RNG stream keyed by ``(seed, stream, index)``
so results do not depend on how records are distributed over threads. The
hidden type behind each record is returned separately and never stored on
the record itself.
"""
from __future__ import annotations

import itertools
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .candidates import BudgetSchedule, generate_candidates, word_budget
from .numcore import sigmoid, softmax
from .selection import random_policy
from .world import Prompt, World, sample_initial

STREAM_PAIRWISE = 1
STREAM_RELEVANCE = 2
STREAM_SEQUENTIAL = 3
STREAM_PICKAPIC = 4
STREAM_RANKED = 5


def stream_rng(seed: int, stream: int, index: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(stream), int(index)])


def parallel_map(fn, n: int, n_jobs: int = 1) -> list:
    if n_jobs <= 1:
        return [fn(i) for i in range(n)]
    with ThreadPoolExecutor(max_workers=n_jobs) as pool:
        return list(pool.map(fn, range(n)))


# ---------------------------------------------------------------------------
# record types
# ---------------------------------------------------------------------------

PREFERENCE_TARGET = {"a": 1.0, "b": 0.0, "tie": 0.5}


@dataclass
class PairwiseRecord:
    """One comparison. ``group`` is an opaque annotator-session id shared by
    comparisons labeled by the same rater on the same prompt."""

    prompt: Prompt
    item_a: np.ndarray
    item_b: np.ndarray
    preferred: str
    group: int | None = None

    @property
    def target(self) -> float:
        return PREFERENCE_TARGET[self.preferred]

    def to_json(self) -> dict:
        return {"prompt": list(self.prompt), "item_a": self.item_a.tolist(),
                "item_b": self.item_b.tolist(), "preferred": self.preferred, "group": self.group}

    @classmethod
    def from_json(cls, d: dict) -> "PairwiseRecord":
        return cls(tuple(d["prompt"]), np.asarray(d["item_a"]), np.asarray(d["item_b"]),
                   d["preferred"], d.get("group"))


@dataclass
class RelevanceRecord:
    prompt: Prompt
    item: np.ndarray
    level: int
    rating: float

    def to_json(self) -> dict:
        return {"prompt": list(self.prompt), "item": self.item.tolist(),
                "level": self.level, "rating": self.rating}

    @classmethod
    def from_json(cls, d: dict) -> "RelevanceRecord":
        return cls(tuple(d["prompt"]), np.asarray(d["item"]), int(d["level"]), float(d["rating"]))


@dataclass
class SequentialTurn:
    slate: tuple[Prompt, ...]
    items: np.ndarray  # (L, M, item_dim)
    choice: int
    in_turn: list[tuple[int, int, float]]  # (column, other column, P(column preferred) target)

    def to_json(self) -> dict:
        return {"slate": [list(p) for p in self.slate], "items": self.items.tolist(),
                "choice": self.choice, "in_turn": [list(x) for x in self.in_turn]}

    @classmethod
    def from_json(cls, d: dict) -> "SequentialTurn":
        return cls(tuple(tuple(p) for p in d["slate"]), np.asarray(d["items"], dtype=float),
                   int(d["choice"]), [(int(a), int(b), float(y)) for a, b, y in d["in_turn"]])


@dataclass
class SequentialSession:
    p0: Prompt
    turns: list[SequentialTurn]
    cross_turn: list[float]  # target that turn t's chosen column beats turn t-1's, t = 2..H

    def to_json(self) -> dict:
        return {"p0": list(self.p0), "turns": [t.to_json() for t in self.turns],
                "cross_turn": list(self.cross_turn)}

    @classmethod
    def from_json(cls, d: dict) -> "SequentialSession":
        return cls(tuple(d["p0"]), [SequentialTurn.from_json(t) for t in d["turns"]],
                   [float(y) for y in d["cross_turn"]])


@dataclass
class LabeledDatasets:
    pairwise: list[PairwiseRecord] = field(default_factory=list)
    relevance: list[RelevanceRecord] = field(default_factory=list)
    sequential: list[SequentialSession] = field(default_factory=list)
    hidden: dict[str, list[int]] = field(default_factory=dict)


# ---------------------------------------------------------------------------
# synthesis
# ---------------------------------------------------------------------------

def sample_preference(score_a: float, score_b: float, temperature: float,
                      rng: np.random.Generator) -> str:
    """Bradley-Terry draw with ``P(a) = logistic((score_a - score_b) / temperature)``."""
    return "a" if rng.random() < sigmoid((score_a - score_b) / temperature) else "b"


def _pairwise_group(world: World, seed: int, g: int, size: int):
    rng = stream_rng(seed, STREAM_PAIRWISE, g)
    k, prompt = sample_initial(world.initial, rng)
    temp = world.users[k].choice_temperature
    out = []
    for _ in range(size):
        items = world.items(prompt, 2, rng)
        s = world.scores(k, prompt, items)
        out.append(PairwiseRecord(prompt, items[0], items[1], sample_preference(s[0], s[1], temp, rng), g))
    return out, k


def synth_pairwise(world: World, n: int, seed: int, comparisons_per_group: int = 1, n_jobs: int = 1):
    """``n`` comparisons in annotator groups of ``comparisons_per_group``.

    Each group draws one hidden type and one prompt; every comparison in it
    gets two fresh items. Returns ``(records, hidden_type_per_record)``.
    """
    if n < 1 or comparisons_per_group < 1:
        raise ValueError("n and comparisons_per_group must be >= 1")
    n_groups = -(-n // comparisons_per_group)
    sizes = [min(comparisons_per_group, n - g * comparisons_per_group) for g in range(n_groups)]
    out = parallel_map(lambda g: _pairwise_group(world, seed, g, sizes[g]), n_groups, n_jobs)
    records = [r for recs, _ in out for r in recs]
    hidden = [k for recs, k in out for _ in recs]
    return records, hidden


def discretize_rating(score: float, levels: int) -> tuple[int, float]:
    """Map a score in [0, 1] to a level in 1..S and its normalized value in [0, 1]."""
    level = int(min(levels, np.floor(score * levels) + 1))
    return level, (level - 1) / (levels - 1) if levels > 1 else 1.0


def _relevance_one(world: World, seed: int, i: int):
    rng = stream_rng(seed, STREAM_RELEVANCE, i)
    k, prompt = sample_initial(world.initial, rng)
    item = world.items(prompt, 1, rng)[0]
    s = float(world.scores(k, prompt, item[None])[0])
    noisy = float(np.clip(s + world.config.relevance_noise * rng.normal(), 0.0, 1.0))
    level, rating = discretize_rating(noisy, world.config.relevance_levels)
    return RelevanceRecord(prompt, item, level, rating), k


def synth_relevance(world: World, n: int, seed: int, n_jobs: int = 1):
    if n < 1:
        raise ValueError("n must be >= 1")
    out = parallel_map(lambda i: _relevance_one(world, seed, i), n, n_jobs)
    return [r for r, _ in out], [k for _, k in out]


@dataclass(frozen=True)
class SessionShape:
    horizon: int = 5
    slate_size: int = 4
    items_per_prompt: int = 4
    n_candidates: int = 25
    n_categories: int = 5


def _sequential_one(world: World, shape: SessionShape, seed: int, i: int):
    rng = stream_rng(seed, STREAM_SEQUENTIAL, i)
    k, p0 = sample_initial(world.initial, rng)
    user = world.users[k]
    sched = BudgetSchedule(len(p0), world.config.max_words, shape.horizon)
    chosen = p0
    turns, cross, prev_best = [], [], None
    for t in range(1, shape.horizon + 1):
        cands = generate_candidates(chosen, world.vocab, word_budget(sched, t), shape.n_candidates,
                                    rng, shape.n_categories)
        idx = random_policy(cands, shape.slate_size, rng)
        slate = tuple(cands.prompts[j] for j in idx)
        items = np.stack([world.items(p, shape.items_per_prompt, rng) for p in slate])
        scores = world.scores(k, p0, items)
        best = scores.max(axis=-1)
        probs = softmax(world.column_utilities(k, p0, items) / user.choice_temperature)
        c = int(rng.choice(len(slate), p=probs))
        in_turn = []
        for a, b in itertools.combinations(range(len(slate)), 2):
            pref = sample_preference(best[a], best[b], user.choice_temperature, rng)
            in_turn.append((a, b, 1.0 if pref == "a" else 0.0))
        if prev_best is not None:
            pref = sample_preference(best[c], prev_best, user.choice_temperature, rng)
            cross.append(1.0 if pref == "a" else 0.0)
        prev_best = best[c]
        turns.append(SequentialTurn(slate, items, c, in_turn))
        chosen = slate[c]
    return SequentialSession(p0, turns, cross), k


def synth_sequential(world: World, n_sessions: int, seed: int, shape: SessionShape | None = None,
                     n_jobs: int = 1):
    """Multi-turn sessions collected with the category-constrained random selector."""
    if n_sessions < 1:
        raise ValueError("n_sessions must be >= 1")
    shape = shape or SessionShape()
    out = parallel_map(lambda i: _sequential_one(world, shape, seed, i), n_sessions, n_jobs)
    return [r for r, _ in out], [k for _, k in out]


# ---------------------------------------------------------------------------
# evaluation sets
# ---------------------------------------------------------------------------

@dataclass
class PairGroup:
    """Several comparisons on one prompt by one synthetic rater."""

    prompt: Prompt
    pairs: list[PairwiseRecord]


def make_pickapic_testset(world: World, n_groups: int, pairs_per_group: int, seed: int,
                          tie_margin: float = 0.0):
    """Rater-grouped comparisons; a pair is labeled a tie when the true gap is below ``tie_margin``."""
    groups, hidden = [], []
    for g in range(n_groups):
        rng = stream_rng(seed, STREAM_PICKAPIC, g)
        k, prompt = sample_initial(world.initial, rng)
        pairs = []
        for _ in range(pairs_per_group):
            items = world.items(prompt, 2, rng)
            s = world.scores(k, prompt, items)
            if abs(s[0] - s[1]) < tie_margin:
                pref = "tie"
            else:
                pref = sample_preference(s[0], s[1], world.users[k].choice_temperature, rng)
            pairs.append(PairwiseRecord(prompt, items[0], items[1], pref))
        groups.append(PairGroup(prompt, pairs))
        hidden.append(k)
    return groups, hidden


@dataclass
class RankedList:
    prompt: Prompt
    items: np.ndarray  # best first


def make_ranked_testset(world: World, n_lists: int, list_size: int, seed: int):
    """Item lists ordered by one rater's true scores."""
    lists, hidden = [], []
    for j in range(n_lists):
        rng = stream_rng(seed, STREAM_RANKED, j)
        k, prompt = sample_initial(world.initial, rng)
        items = world.items(prompt, list_size, rng)
        order = np.argsort(-world.scores(k, prompt, items), kind="stable")
        lists.append(RankedList(prompt, items[order]))
        hidden.append(k)
    return lists, hidden


# ---------------------------------------------------------------------------
# IO
# ---------------------------------------------------------------------------

RECORD_TYPES = {"pairwise": PairwiseRecord, "relevance": RelevanceRecord,
                "sequential": SequentialSession}


def write_jsonl(path, header: dict, rows) -> None:
    with open(path, "w") as fh:
        fh.write(json.dumps({"kind": "header", **header}, sort_keys=True) + "\n")
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def read_jsonl(path) -> tuple[dict, list[dict]]:
    with open(path) as fh:
        lines = [json.loads(line) for line in fh if line.strip()]
    if not lines or lines[0].get("kind") != "header":
        raise ValueError(f"{path}: missing header record")
    return lines[0], lines[1:]


def save_records(path, kind: str, records, world: World, extra: dict | None = None) -> None:
    header = {"dataset": kind, "world": world.header(), **(extra or {})}
    write_jsonl(path, header, (r.to_json() for r in records))


def load_records(path, kind: str | None = None):
    header, rows = read_jsonl(path)
    kind = kind or header.get("dataset")
    if kind not in RECORD_TYPES:
        raise ValueError(f"{path}: unknown dataset kind {kind!r}")
    if header.get("dataset") != kind:
        raise ValueError(f"{path}: expected {kind} records, found {header.get('dataset')}")
    return header, [RECORD_TYPES[kind].from_json(r) for r in rows]
