"""Learnable multi-type user model.

Scores are cosine similarities between type-specific text and item
embeddings. Each type-specific embedding is a frozen base encoding plus a
residual produced by a shared user encoder whose last layer is split into
``K`` blocks. Column utilities aggregate per-item scores and choices follow a
softmax whose positive temperature is itself a small function of the sorted
column utilities.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .numcore import (Params, init_mlp, log_softmax, logsumexp, mlp_backward, mlp_forward,
                      mlp_grads_to_params, mlp_to_params, mlp_view, sigmoid, softmax, softplus)

BASE_ACTS = ["tanh", "identity"]
USER_ACTS = ["tanh", "tanh", "identity"]
TEMP_ACTS = ["tanh", "identity"]
AGGREGATORS = ("average", "max", "softmax_sample")
LIKELIHOOD_FLOOR = 1e-30
TAU_FLOOR = 1e-3


class DegeneratePosteriorError(ValueError):
    pass


@dataclass
class UserModelConfig:
    n_types: int = 4
    text_dim: int = 9
    item_dim: int = 8
    embed_dim: int = 8
    base_hidden: int = 32
    slate_size: int = 4
    temp_hidden: int = 8
    agg: str = "softmax_sample"
    agg_temperature: float = 0.1
    init_choice_temperature: float = 10.0
    init_score_temperature: float = 1.0
    residual_scale: float = 1.0
    reward_sigma: float = 0.1
    # a learned scale above 1 lets training saturate the clamp, which ties many scores
    learn_score_temperature: bool = False

    def __post_init__(self):
        if self.n_types < 1:
            raise ValueError("n_types must be >= 1")
        if self.agg not in AGGREGATORS:
            raise ValueError(f"unknown aggregator {self.agg!r}")


# ---------------------------------------------------------------------------
# aggregation kernels (shared with the trainer)
# ---------------------------------------------------------------------------

def aggregate(scores: np.ndarray, agg: str, temperature: float = 1.0):
    """Reduce the last axis of ``scores``. ``softmax_sample`` returns its expectation."""
    if agg == "average":
        return scores.mean(axis=-1), None
    if agg == "max":
        idx = np.argmax(scores, axis=-1)
        return np.take_along_axis(scores, idx[..., None], axis=-1)[..., 0], idx
    if agg == "softmax_sample":
        w = softmax(scores / temperature, axis=-1)
        r = np.sum(w * scores, axis=-1)
        return r, (w, r)
    raise ValueError(f"unknown aggregator {agg!r}")


def aggregate_backward(scores: np.ndarray, agg: str, temperature: float, cache, d_r: np.ndarray):
    if agg == "average":
        return np.repeat(d_r[..., None] / scores.shape[-1], scores.shape[-1], axis=-1)
    if agg == "max":
        out = np.zeros_like(scores)
        np.put_along_axis(out, cache[..., None], d_r[..., None], axis=-1)
        return out
    w, r = cache
    return d_r[..., None] * w * (1.0 + (scores - r[..., None]) / temperature)


def posterior_from_loglik(prior, loglik) -> np.ndarray:
    """Bayes rule in log space over the last axis; ``loglik`` broadcasts against ``prior``."""
    prior = np.asarray(prior, dtype=float)
    loglik = np.maximum(np.asarray(loglik, dtype=float), np.log(LIKELIHOOD_FLOOR))
    with np.errstate(divide="ignore"):
        logits = np.log(prior) + loglik
    norm = logsumexp(logits, axis=-1, keepdims=True)
    if not np.all(np.isfinite(norm)):
        raise DegeneratePosteriorError("degenerate posterior")
    return np.exp(logits - norm)


def posterior(prior, likelihoods) -> np.ndarray:
    """Posterior over types from per-type likelihoods (floored at 1e-30)."""
    lik = np.maximum(np.asarray(likelihoods, dtype=float), LIKELIHOOD_FLOOR)
    return posterior_from_loglik(prior, np.log(lik))


# ---------------------------------------------------------------------------
# the model
# ---------------------------------------------------------------------------

@dataclass
class UserModel:
    config: UserModelConfig
    params: Params
    prior: np.ndarray
    world_seed: int | None = None
    frozen: tuple[str, ...] = field(default=("base_text", "base_item"))

    @classmethod
    def initialize(cls, config: UserModelConfig, rng: np.random.Generator,
                   world_seed: int | None = None) -> "UserModel":
        c = config
        d, k = c.embed_dim, c.n_types
        p: Params = {}
        p.update(mlp_to_params(init_mlp([c.text_dim, c.base_hidden, d], BASE_ACTS, rng, 1.5), "base_text"))
        p.update(mlp_to_params(init_mlp([c.item_dim, c.base_hidden, d], BASE_ACTS, rng, 1.5), "base_item"))
        for name in ("user_text", "user_item"):
            mlp = init_mlp([d, 2 * d, 4 * d, k * d], USER_ACTS, rng)
            mlp.weights[-1] *= c.residual_scale
            p.update(mlp_to_params(mlp, name))
        p["log_score_temp"] = np.array([np.log(c.init_score_temperature)])
        tmlp = init_mlp([c.slate_size, c.temp_hidden, 1], TEMP_ACTS, rng, 0.5)
        tmlp.biases[-1][:] = np.log(np.expm1(c.init_choice_temperature))
        p.update(mlp_to_params(tmlp, "choice_temp"))
        return cls(config, p, np.full(k, 1.0 / k), world_seed)

    @property
    def n_types(self) -> int:
        return self.config.n_types

    @property
    def score_temperature(self) -> float:
        return float(np.exp(self.params["log_score_temp"][0]))

    def copy(self) -> "UserModel":
        return UserModel(self.config, {k: v.copy() for k, v in self.params.items()},
                         self.prior.copy(), self.world_seed, self.frozen)

    def trainable_keys(self, train_base: bool = False) -> list[str]:
        skip = () if train_base else self.frozen
        if not self.config.learn_score_temperature:
            skip = skip + ("log_score_temp",)
        return sorted(k for k in self.params if k.split(".")[0] not in skip)

    # -- encoders ---------------------------------------------------------

    def _encode(self, params: Params, which: str, x: np.ndarray):
        c = self.config
        base = mlp_view(params, f"base_{which}", BASE_ACTS)
        user = mlp_view(params, f"user_{which}", USER_ACTS)
        bo, bcache = mlp_forward(base, x, return_cache=True)
        uo, ucache = mlp_forward(user, bo, return_cache=True)
        raw = bo[:, None, :] + uo.reshape(len(x), c.n_types, c.embed_dim)
        # a zero raw embedding maps to zero, which scores 0.5 against anything
        norm = np.maximum(np.linalg.norm(raw, axis=-1, keepdims=True), 1e-12)
        return raw / norm, (base, user, bcache, ucache, norm)

    def _encode_backward(self, which: str, cache, e: np.ndarray, d_e: np.ndarray,
                         train_base: bool) -> Params:
        base, user, bcache, ucache, norm = cache
        d_raw = (d_e - e * np.sum(e * d_e, axis=-1, keepdims=True)) / norm
        dws, dbs, d_bo = mlp_backward(user, ucache, d_raw.reshape(len(d_raw), -1))
        grads = mlp_grads_to_params(dws, dbs, f"user_{which}")
        d_bo = d_bo + d_raw.sum(axis=1)
        if train_base:
            dws, dbs, _ = mlp_backward(base, bcache, d_bo)
            grads.update(mlp_grads_to_params(dws, dbs, f"base_{which}"))
        return grads

    def encode_text(self, text: np.ndarray) -> np.ndarray:
        return self._encode(self.params, "text", np.atleast_2d(text))[0]

    def encode_item(self, items: np.ndarray) -> np.ndarray:
        return self._encode(self.params, "item", np.atleast_2d(items))[0]

    # -- scores -----------------------------------------------------------

    def score_forward(self, params: Params, texts: np.ndarray, items: np.ndarray,
                      text_index: np.ndarray):
        """Scores ``(n_items, K)``; ``text_index[i]`` selects the text row paired with item ``i``."""
        e_t, tcache = self._encode(params, "text", texts)
        e_i, icache = self._encode(params, "item", items)
        et_sel = e_t[text_index]
        cos = np.sum(et_sel * e_i, axis=-1)
        temp = np.exp(params["log_score_temp"][0])
        z = temp * cos
        s = 0.5 * (1.0 + np.clip(z, -1.0, 1.0))
        return s, (e_t, tcache, e_i, icache, et_sel, cos, temp, z, text_index)

    def score_backward(self, cache, d_s: np.ndarray, train_base: bool = False) -> Params:
        e_t, tcache, e_i, icache, et_sel, cos, temp, z, text_index = cache
        d_z = 0.5 * d_s * (np.abs(z) < 1.0)
        grads: Params = {"log_score_temp": np.array([np.sum(d_z * cos) * temp])}
        d_cos = d_z * temp
        d_ei = d_cos[..., None] * et_sel
        d_et = np.zeros_like(e_t)
        np.add.at(d_et, text_index, d_cos[..., None] * e_i)
        grads.update(self._encode_backward("item", icache, e_i, d_ei, train_base))
        grads.update(self._encode_backward("text", tcache, e_t, d_et, train_base))
        return grads

    def scores(self, text: np.ndarray, items: np.ndarray) -> np.ndarray:
        """All-type scores for one prompt embedding and items ``(..., item_dim)`` -> ``(..., K)``."""
        items = np.asarray(items, dtype=float)
        flat = items.reshape(-1, items.shape[-1])
        s, _ = self.score_forward(self.params, np.atleast_2d(text), flat, np.zeros(len(flat), dtype=int))
        return s.reshape(items.shape[:-1] + (self.n_types,))

    def score(self, k: int, text: np.ndarray, item: np.ndarray) -> float:
        self._check_type(k)
        return float(self.scores(text, np.asarray(item)[None])[0, k])

    def _check_type(self, k: int) -> None:
        if not 0 <= k < self.n_types:
            raise IndexError(f"type index {k} out of range [0, {self.n_types})")

    # -- utilities and choices -------------------------------------------

    def utilities(self, text: np.ndarray, items: np.ndarray, agg: str | None = None,
                  rng: np.random.Generator | None = None) -> np.ndarray:
        """Per-type utilities ``(K, ...)`` for items ``(..., M, item_dim)``.

        With ``softmax_sample`` and an ``rng`` an item index is drawn per column
        and its score returned; without ``rng`` the expectation is returned.
        """
        agg = agg or self.config.agg
        s = np.moveaxis(self.scores(text, items), -1, 0)
        if agg == "softmax_sample" and rng is not None:
            w = softmax(s / self.config.agg_temperature, axis=-1)
            u = rng.random(w.shape[:-1] + (1,))
            idx = np.minimum((np.cumsum(w, axis=-1) < u).sum(axis=-1), w.shape[-1] - 1)
            return np.take_along_axis(s, idx[..., None], axis=-1)[..., 0]
        return aggregate(s, agg, self.config.agg_temperature)[0]

    def utility(self, k: int, text: np.ndarray, items: np.ndarray, agg: str | None = None,
                rng: np.random.Generator | None = None) -> float:
        self._check_type(k)
        return float(self.utilities(text, np.asarray(items)[None], agg, rng)[k, 0])

    def choice_temperature_forward(self, params: Params, r: np.ndarray):
        """``tau = softplus(h(sorted R)) + floor`` for utilities ``r`` of shape ``(..., L)``."""
        if r.shape[-1] != self.config.slate_size:
            raise ValueError(f"slate has {r.shape[-1]} columns, model expects {self.config.slate_size}")
        order = np.argsort(-r, axis=-1, kind="stable")
        r_sorted = np.take_along_axis(r, order, axis=-1)
        net = mlp_view(params, "choice_temp", TEMP_ACTS)
        flat = r_sorted.reshape(-1, r.shape[-1])
        zout, cache = mlp_forward(net, flat, return_cache=True)
        z = zout[:, 0].reshape(r.shape[:-1])
        tau = softplus(z) + TAU_FLOOR
        return tau, (order, net, cache, z)

    def choice_temperature_backward(self, cache, d_tau: np.ndarray):
        order, net, mcache, z = cache
        d_z = (d_tau * sigmoid(z)).reshape(-1, 1)
        dws, dbs, d_sorted = mlp_backward(net, mcache, d_z)
        d_r = np.zeros(order.shape)
        np.put_along_axis(d_r, order, d_sorted.reshape(order.shape), axis=-1)
        return mlp_grads_to_params(dws, dbs, "choice_temp"), d_r

    def choice_probs_from_utilities(self, r: np.ndarray) -> np.ndarray:
        tau, _ = self.choice_temperature_forward(self.params, np.asarray(r, dtype=float))
        return softmax(tau[..., None] * r, axis=-1)

    def all_choice_probs(self, text: np.ndarray, slate_items: np.ndarray) -> np.ndarray:
        """Choice distribution per type ``(K, L)`` for items ``(L, M, item_dim)``."""
        return self.choice_probs_from_utilities(self.utilities(text, slate_items))

    def choice_probs(self, k: int, text: np.ndarray, slate_items: np.ndarray) -> np.ndarray:
        self._check_type(k)
        if np.shape(slate_items)[0] < 2:
            raise ValueError("a slate needs at least two columns")
        return self.all_choice_probs(text, slate_items)[k]

    def sample_choice(self, k: int, text: np.ndarray, slate_items: np.ndarray,
                      rng: np.random.Generator) -> int:
        p = self.choice_probs(k, text, slate_items)
        return int(rng.choice(len(p), p=p))

    def choice_loglik(self, text: np.ndarray, slate_items: np.ndarray, choice: int) -> np.ndarray:
        r = self.utilities(text, slate_items)
        tau, _ = self.choice_temperature_forward(self.params, r)
        return log_softmax(tau[:, None] * r, axis=-1)[:, choice]

    # -- inference over types --------------------------------------------

    def pair_loglik(self, text: np.ndarray, item_a: np.ndarray, item_b: np.ndarray,
                    label: float) -> np.ndarray:
        """Per-type Bradley-Terry log-likelihood; ``label`` is P(first preferred) target (1, 0, 0.5)."""
        s = self.scores(text, np.stack([item_a, item_b]))
        gap = s[0] - s[1]
        return label * -np.logaddexp(0.0, -gap) + (1.0 - label) * -np.logaddexp(0.0, gap)

    def posterior(self, loglik: np.ndarray, prior: np.ndarray | None = None) -> np.ndarray:
        return posterior_from_loglik(self.prior if prior is None else prior, loglik)

    def belief_update(self, belief: np.ndarray, text: np.ndarray, slate_items: np.ndarray,
                      choice: int, reward: float | None = None) -> np.ndarray:
        """One Bayes step on a (slate, choice, reward) observation.

        The reward likelihood is Gaussian around each type's utility of the
        chosen column with standard deviation ``config.reward_sigma``; pass
        ``reward=None`` when no reward was observed.
        """
        belief = np.asarray(belief, dtype=float)
        if np.any(belief < 0) or abs(belief.sum() - 1.0) > 1e-9:
            raise ValueError("belief must lie on the simplex")
        r = self.utilities(text, slate_items)
        tau, _ = self.choice_temperature_forward(self.params, r)
        ll = log_softmax(tau[:, None] * r, axis=-1)[:, choice]
        if reward is not None:
            sig = self.config.reward_sigma
            ll = ll - 0.5 * ((reward - r[:, choice]) / sig) ** 2
        return posterior_from_loglik(belief, ll)

    # -- persistence ------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "kind": "user_model",
            "world_seed": self.world_seed,
            "config": asdict(self.config),
            "frozen": list(self.frozen),
            "prior": self.prior.tolist(),
            "params": {k: {"shape": list(v.shape), "data": v.reshape(-1).tolist()}
                       for k, v in sorted(self.params.items())},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "UserModel":
        if d.get("kind") != "user_model":
            raise ValueError("not a user-model checkpoint")
        params = {k: np.asarray(v["data"], dtype=float).reshape(v["shape"]) for k, v in d["params"].items()}
        return cls(UserModelConfig(**d["config"]), params, np.asarray(d["prior"], dtype=float),
                   d.get("world_seed"), tuple(d.get("frozen", ("base_text", "base_item"))))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path) -> "UserModel":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))
