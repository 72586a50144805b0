"""Seeded categorized prompt-expansion candidates under a per-turn word budget."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .world import Prompt, Vocabulary


@dataclass(frozen=True)
class BudgetSchedule:
    initial_words: int
    max_words: int
    horizon: int
    mode: str = "linear"

    def __post_init__(self):
        if not 1 <= self.initial_words <= self.max_words:
            raise ValueError("need 1 <= initial_words <= max_words")
        if self.horizon < 1:
            raise ValueError("horizon must be positive")
        if self.mode not in ("linear", "recurrence"):
            raise ValueError(f"unknown budget mode {self.mode!r}")


def word_budget(schedule: BudgetSchedule, t: int) -> int:
    """Word limit for prompts shown at turn ``t``.

    ``linear`` interpolates from the initial word count (t=0) to the maximum
    (t=H). ``recurrence`` iterates ``N_t = N_{t-1} (N_max - N_{t-1}) / H * t``
    and clamps each iterate to ``[N_0, N_max]``.
    """
    if t < 0 or t > schedule.horizon:
        raise ValueError(f"turn {t} outside [0, {schedule.horizon}]")
    n0, nmax, h = schedule.initial_words, schedule.max_words, schedule.horizon
    if schedule.mode == "linear":
        return int(round(n0 + (nmax - n0) * t / h))
    n = float(n0)
    for s in range(1, t + 1):
        n = n * (nmax - n) / h * s
        n = min(max(n, n0), nmax)
    return int(round(n))


@dataclass(frozen=True)
class CandidateSet:
    prompts: tuple[Prompt, ...]
    categories: tuple[int, ...]
    base: Prompt
    saturated: bool = False

    def __len__(self) -> int:
        return len(self.prompts)

    def members(self, category: int) -> list[int]:
        return [i for i, c in enumerate(self.categories) if c == category]

    @property
    def n_categories(self) -> int:
        return max(self.categories) + 1 if self.categories else 0

    def to_record(self) -> dict:
        n = len(self.base)
        return {"appended": [list(p[n:]) for p in self.prompts],
                "categories": list(self.categories), "saturated": self.saturated}

    @classmethod
    def from_record(cls, base: Prompt, rec: dict) -> "CandidateSet":
        base = tuple(base)
        return cls(tuple(base + tuple(a) for a in rec["appended"]), tuple(rec["categories"]),
                   base, bool(rec.get("saturated", False)))


def category_counts(n_candidates: int, n_categories: int) -> list[int]:
    q, r = divmod(n_candidates, n_categories)
    return [q + (1 if c < r else 0) for c in range(n_categories)]


def generate_candidates(current: Prompt, vocab: Vocabulary, budget: int, n_candidates: int,
                        rng: np.random.Generator, n_categories: int | None = None,
                        max_tries: int = 100) -> CandidateSet:
    """Expand ``current`` into ``n_candidates`` prompts spread over the category pools.

    Each candidate appends between 1 and ``budget - len(current)`` tokens drawn
    from its category's pool. Duplicates are resampled (up to ``max_tries``).
    """
    current = vocab.validate(current)
    n_cat = n_categories if n_categories is not None else vocab.n_categories
    if n_cat > vocab.n_categories:
        raise ValueError("more categories requested than the vocabulary provides")
    if n_candidates < n_cat:
        raise ValueError("need at least one candidate per category")
    counts = category_counts(n_candidates, n_cat)
    cats = tuple(c for c, n in enumerate(counts) for _ in range(n))
    room = budget - len(current)
    if room < 1:
        return CandidateSet(tuple(current for _ in cats), cats, current, saturated=True)
    prompts: list[Prompt] = []
    seen: set[Prompt] = set()
    for c in cats:
        pool = vocab.category_pools[c]
        for _ in range(max_tries):
            n_app = int(rng.integers(1, room + 1))
            picks = rng.integers(0, len(pool), size=n_app)
            cand = current + tuple(pool[i] for i in picks)
            if cand not in seen:
                break
        seen.add(cand)
        prompts.append(cand)
    return CandidateSet(tuple(prompts), cats, current)
