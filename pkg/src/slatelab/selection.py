"""Category-constrained slate selection: greedy argmax, brute force, uniform random."""
from __future__ import annotations

import itertools

import numpy as np

from .candidates import CandidateSet


class InfeasibleSlateError(ValueError):
    pass


def _check_feasible(categories, n_slate: int) -> None:
    if len(set(categories)) < n_slate:
        raise InfeasibleSlateError(
            f"only {len(set(categories))} non-empty categories for a slate of {n_slate}")


def select_slate_indices(values, categories, n_slate: int) -> list[int]:
    """Indices of the best slate holding at most one candidate per category.

    The objective is a sum of per-candidate values over a partition matroid,
    so taking candidates in descending value order while skipping used
    categories is exact. Ties go to the lower candidate index.
    """
    values = np.asarray(values, dtype=float)
    if values.shape != (len(categories),):
        raise ValueError("one value per candidate required")
    _check_feasible(categories, n_slate)
    order = np.argsort(-values, kind="stable")
    chosen, used = [], set()
    for i in order:
        c = categories[i]
        if c in used:
            continue
        chosen.append(int(i))
        used.add(c)
        if len(chosen) == n_slate:
            break
    return chosen


def brute_force_slate(values, categories, n_slate: int) -> tuple[list[int], float]:
    """Exhaustive search over all feasible subsets; oracle for :func:`select_slate_indices`."""
    values = np.asarray(values, dtype=float)
    _check_feasible(categories, n_slate)
    best, best_val = None, -np.inf
    for combo in itertools.combinations(range(len(values)), n_slate):
        if len({categories[i] for i in combo}) < n_slate:
            continue
        v = float(sum(values[i] for i in combo))
        if v > best_val:
            best, best_val = list(combo), v
    return best, best_val


def random_policy_indices(categories, n_slate: int, rng: np.random.Generator) -> list[int]:
    """Uniform draw over all feasible category-constrained subsets."""
    _check_feasible(categories, n_slate)
    members: dict[int, list[int]] = {}
    for i, c in enumerate(categories):
        members.setdefault(c, []).append(i)
    cats = sorted(members)
    combos = list(itertools.combinations(cats, n_slate))
    weights = np.array([np.prod([len(members[c]) for c in combo]) for combo in combos], dtype=float)
    combo = combos[int(rng.choice(len(combos), p=weights / weights.sum()))]
    return [members[c][int(rng.integers(len(members[c])))] for c in combo]


def random_policy(candidates: CandidateSet, n_slate: int, rng: np.random.Generator) -> list[int]:
    return random_policy_indices(candidates.categories, n_slate, rng)
