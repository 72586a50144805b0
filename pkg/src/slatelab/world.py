"""Synthetic ground-truth universe: vocabulary, prompt embedding, item generator,
planted user types and the initial (type, prompt) distribution."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .numcore import sigmoid, softmax

Prompt = tuple[str, ...]


@dataclass(frozen=True)
class WorldConfig:
    n_categories: int = 5
    words_per_category: int = 12
    n_base_words: int = 24
    prompt_dim: int = 8
    item_dim: int = 8
    category_spread: float = 1.0
    word_noise: float = 0.6
    max_words: int = 62
    max_init_words: int = 3
    n_types: int = 4
    type_separation: float = 0.3
    taste_scale: float = 6.0
    # fraction of the across-type mean removed from the item part of the tastes;
    # 1.0 leaves no population-wide item preference
    taste_centering: float = 1.0
    # weight pulling each type's item taste toward the items of its own category
    category_affinity: float = 0.0
    choice_temperature: float = 0.05
    noise_sigma: float = 0.3
    generator_scale: float = 1.5
    type_prior: tuple[float, ...] | None = None
    utility_agg: str = "max"
    relevance_levels: int = 5
    relevance_noise: float = 0.05

    def __post_init__(self):
        if self.n_types < 1 or self.n_categories < 1:
            raise ValueError("n_types and n_categories must be >= 1")
        for name in ("taste_centering", "category_affinity"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.category_affinity > 0.0 and self.n_types > self.n_categories:
            raise ValueError("category_affinity needs n_types <= n_categories")
        if self.utility_agg not in ("max", "mean"):
            raise ValueError(f"utility_agg must be 'max' or 'mean', got {self.utility_agg!r}")
        if self.max_init_words < 1 or self.max_init_words > self.n_base_words:
            raise ValueError("max_init_words must lie in [1, n_base_words]")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["type_prior"] = None if self.type_prior is None else list(self.type_prior)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "WorldConfig":
        d = dict(d)
        if d.get("type_prior") is not None:
            d["type_prior"] = tuple(float(x) for x in d["type_prior"])
        return cls(**d)


@dataclass
class Vocabulary:
    words: list[str]
    category_pools: list[list[str]]
    base_words: list[str]
    word_embeddings: np.ndarray
    max_words: int
    index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        if len(set(self.words)) != len(self.words):
            raise ValueError("vocabulary words must be distinct")
        self.index = {w: i for i, w in enumerate(self.words)}
        seen: set[str] = set()
        for pool in self.category_pools:
            if not pool:
                raise ValueError("category pools must be non-empty")
            if seen & set(pool):
                raise ValueError("category pools must be disjoint")
            seen |= set(pool)
        self.category_of_word = {w: c for c, pool in enumerate(self.category_pools) for w in pool}

    @property
    def embed_dim(self) -> int:
        return self.word_embeddings.shape[1]

    @property
    def n_categories(self) -> int:
        return len(self.category_pools)

    def validate(self, prompt) -> Prompt:
        prompt = tuple(prompt)
        if not prompt:
            raise ValueError("prompt must contain at least one word")
        for w in prompt:
            if w not in self.index:
                raise ValueError(f"unknown token {w!r}")
        return prompt


def embed_prompt(vocab: Vocabulary, prompt) -> np.ndarray:
    """Bag-of-words mean embedding with a trailing normalized word-count feature."""
    prompt = vocab.validate(prompt)
    rows = vocab.word_embeddings[[vocab.index[w] for w in prompt]]
    return np.concatenate([rows.mean(axis=0), [len(prompt) / vocab.max_words]])


def embed_prompts(vocab: Vocabulary, prompts) -> np.ndarray:
    return np.stack([embed_prompt(vocab, p) for p in prompts])


@dataclass
class ItemGenerator:
    weight: np.ndarray  # (prompt_dim + 1, item_dim)
    bias: np.ndarray
    noise_sigma: float

    def mean_item(self, text_embedding: np.ndarray) -> np.ndarray:
        return np.tanh(text_embedding @ self.weight + self.bias)


def generate_items(gen: ItemGenerator, vocab: Vocabulary, prompt, m: int,
                   rng: np.random.Generator) -> np.ndarray:
    """``m`` noisy items ``(m, item_dim)`` for one prompt."""
    if m < 1:
        raise ValueError("M must be >= 1")
    mean = gen.mean_item(embed_prompt(vocab, prompt))
    noise = rng.normal(0.0, 1.0, size=(m, mean.shape[0]))
    return mean + gen.noise_sigma * noise


@dataclass
class GroundTruthUser:
    type_index: int
    taste_vector: np.ndarray  # (prompt_dim + 1 + item_dim,)
    choice_temperature: float


def true_score(vocab: Vocabulary, user: GroundTruthUser, prompt, item) -> float:
    z = np.concatenate([embed_prompt(vocab, prompt), np.asarray(item, dtype=float)])
    if z.shape != user.taste_vector.shape:
        raise ValueError("taste/feature dimension mismatch")
    return float(sigmoid(user.taste_vector @ z))


def true_scores(user: GroundTruthUser, text_embedding: np.ndarray, items: np.ndarray) -> np.ndarray:
    """Vectorized ground-truth scores for items ``(..., item_dim)`` under one prompt embedding."""
    dt = text_embedding.shape[0]
    w_text, w_item = user.taste_vector[:dt], user.taste_vector[dt:]
    return sigmoid(text_embedding @ w_text + items @ w_item)


@dataclass
class InitialDistribution:
    type_prior: np.ndarray
    base_words: list[str]
    max_init_words: int

    def __post_init__(self):
        p = np.asarray(self.type_prior, dtype=float)
        if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
            raise ValueError("type prior must lie on the simplex")
        self.type_prior = p


def sample_prompt(init: InitialDistribution, rng: np.random.Generator) -> Prompt:
    n = int(rng.integers(1, init.max_init_words + 1))
    idx = rng.choice(len(init.base_words), size=n, replace=False)
    return tuple(init.base_words[i] for i in idx)


def sample_initial(init: InitialDistribution, rng: np.random.Generator) -> tuple[int, Prompt]:
    """Independent draws of the hidden type and the initial prompt."""
    k = int(rng.choice(len(init.type_prior), p=init.type_prior))
    return k, sample_prompt(init, rng)


@dataclass
class World:
    config: WorldConfig
    seed: int
    vocab: Vocabulary
    generator: ItemGenerator
    users: list[GroundTruthUser]
    initial: InitialDistribution
    # category each planted type favours, when tastes are tied to categories
    type_categories: list[int] | None = None

    @property
    def n_types(self) -> int:
        return len(self.users)

    def embed(self, prompt) -> np.ndarray:
        return embed_prompt(self.vocab, prompt)

    def items(self, prompt, m: int, rng: np.random.Generator) -> np.ndarray:
        return generate_items(self.generator, self.vocab, prompt, m, rng)

    def scores(self, k: int, prompt, items: np.ndarray) -> np.ndarray:
        return true_scores(self.users[k], self.embed(prompt), np.asarray(items, dtype=float))

    def column_utilities(self, k: int, prompt, items: np.ndarray) -> np.ndarray:
        """Ground-truth utility per column for items ``(L, M, item_dim)``."""
        s = self.scores(k, prompt, items)
        if self.config.utility_agg == "max":
            return s.max(axis=-1)
        return s.mean(axis=-1)

    def choice_probs(self, k: int, prompt, items: np.ndarray) -> np.ndarray:
        r = self.column_utilities(k, prompt, items)
        return softmax(r / self.users[k].choice_temperature)

    def header(self) -> dict:
        return {"kind": "world", "seed": int(self.seed), "config": self.config.to_dict()}


def category_mean_items(vocab: Vocabulary, gen: ItemGenerator) -> np.ndarray:
    """Mean item of a prompt made of each category's words, one row per category."""
    rows = []
    for pool in vocab.category_pools:
        e = vocab.word_embeddings[[vocab.index[w] for w in pool]].mean(axis=0)
        rows.append(gen.mean_item(np.concatenate([e, [0.3]])))
    return np.array(rows)


def spread_categories(points: np.ndarray, k: int) -> list[int]:
    """Greedy farthest-point pick of ``k`` rows, seeded by the farthest pair."""
    dist = np.linalg.norm(points[:, None] - points[None], axis=-1)
    i, j = np.unravel_index(np.argmax(dist), dist.shape)
    chosen = [int(i), int(j)][:k]
    while len(chosen) < k:
        rest = [c for c in range(len(points)) if c not in chosen]
        chosen.append(max(rest, key=lambda c: dist[c, chosen].min()))
    return chosen


def category_item_directions(vocab: Vocabulary, gen: ItemGenerator, k: int) -> tuple[list[int], np.ndarray]:
    """Pick ``k`` far-apart categories and return them with unit item directions
    pointing from their common centre to each one."""
    means = category_mean_items(vocab, gen)
    cats = spread_categories(means, k)
    dirs = means[cats] - means[cats].mean(axis=0)
    return cats, dirs / np.linalg.norm(dirs, axis=1, keepdims=True)


def _sample_tastes(cfg: WorldConfig, rng: np.random.Generator, dim: int,
                   directions: np.ndarray | None = None) -> np.ndarray:
    # bound both the full taste and its item part; the item part drives preferences
    lo = cfg.prompt_dim + 1
    for _ in range(10_000):
        t = rng.normal(size=(cfg.n_types, dim))
        if cfg.n_types > 1:
            t[:, lo:] -= cfg.taste_centering * t[:, lo:].mean(axis=0)
        if directions is not None:
            norm = np.linalg.norm(t[:, lo:], axis=1, keepdims=True)
            mixed = (cfg.category_affinity * directions
                     + (1.0 - cfg.category_affinity) * t[:, lo:] / norm)
            t[:, lo:] = norm * mixed / np.linalg.norm(mixed, axis=1, keepdims=True)
        t /= np.linalg.norm(t, axis=1, keepdims=True)
        item_part = t[:, cfg.prompt_dim + 1:]
        item_part = item_part / np.linalg.norm(item_part, axis=1, keepdims=True)
        worst = -1.0
        for v in (t, item_part):
            cos = v @ v.T
            np.fill_diagonal(cos, -1.0)
            worst = max(worst, cos.max())
        if cfg.n_types == 1 or worst < cfg.type_separation:
            return cfg.taste_scale * t
    raise RuntimeError("could not satisfy the type separation bound; relax type_separation")


def two_type_world_config(**overrides) -> WorldConfig:
    """Two planted types, each tied to the items of one category. Noisier word
    embeddings and sharper items make the choice of words within a category matter."""
    base = dict(n_types=2, category_affinity=1.0, taste_scale=3.0, word_noise=1.8, noise_sigma=0.15)
    base.update(overrides)
    return WorldConfig(**base)


def make_world(config: WorldConfig | None = None, seed: int = 0) -> World:
    """Build a world as a pure function of ``(config, seed)``."""
    cfg = config or WorldConfig()
    rng = np.random.default_rng([seed, 0x5EED])
    d = cfg.prompt_dim
    pools = [[f"c{c}w{j:02d}" for j in range(cfg.words_per_category)] for c in range(cfg.n_categories)]
    base = [f"b{j:02d}" for j in range(cfg.n_base_words)]
    words = base + [w for pool in pools for w in pool]

    centers = rng.normal(size=(cfg.n_categories, d))
    centers *= cfg.category_spread / np.linalg.norm(centers, axis=1, keepdims=True)
    emb = np.empty((len(words), d))
    emb[: len(base)] = rng.normal(0.0, 1.0 / np.sqrt(d), size=(len(base), d))
    for c in range(cfg.n_categories):
        lo = len(base) + c * cfg.words_per_category
        emb[lo: lo + cfg.words_per_category] = centers[c] + rng.normal(
            0.0, cfg.word_noise / np.sqrt(d), size=(cfg.words_per_category, d))
    vocab = Vocabulary(words, pools, base, emb, cfg.max_words)

    w = rng.normal(0.0, cfg.generator_scale / np.sqrt(d + 1), size=(d + 1, cfg.item_dim))
    b = rng.normal(0.0, 0.1, size=cfg.item_dim)
    gen = ItemGenerator(w, b, cfg.noise_sigma)

    planted, dirs = None, None
    if cfg.category_affinity > 0.0 and cfg.n_types > 1:
        planted, dirs = category_item_directions(vocab, gen, cfg.n_types)
    tastes = _sample_tastes(cfg, rng, d + 1 + cfg.item_dim, dirs)
    users = [GroundTruthUser(k, tastes[k], cfg.choice_temperature) for k in range(cfg.n_types)]
    prior = (np.full(cfg.n_types, 1.0 / cfg.n_types) if cfg.type_prior is None
             else np.asarray(cfg.type_prior, dtype=float))
    init = InitialDistribution(prior, base, cfg.max_init_words)
    return World(cfg, int(seed), vocab, gen, users, init, planted)
