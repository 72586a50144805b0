"""Mini-batch EM for the multi-type user model.

Each objective computes a per-record, per-type negative log-likelihood
``nll[i, k]`` and can back-propagate any weighting ``W[i, k]`` of it. EM then
reduces to: posteriors from the target network in the E-step, an EMA update
of the prior, and one optimizer step on ``sum(W * nll)`` with ``W = gamma / n``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .datasets import (LabeledDatasets, PairGroup, PairwiseRecord, RelevanceRecord,
                       SequentialSession)
from .numcore import (OptHyper, OptState, Params, copy_params, cosine_lr, global_norm, init_opt_state, log_softmax,
                      logsumexp, opt_step, sigmoid)
from .usermodel import (LIKELIHOOD_FLOOR, DegeneratePosteriorError, UserModel, UserModelConfig, aggregate,
                        aggregate_backward, posterior_from_loglik)
from .world import Vocabulary, embed_prompt

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# array views of the records
# ---------------------------------------------------------------------------

@dataclass
class PairwiseArrays:
    texts: np.ndarray
    items_a: np.ndarray
    items_b: np.ndarray
    targets: np.ndarray
    groups: np.ndarray  # annotator group per comparison; posteriors are shared within a group

    def __len__(self) -> int:
        return len(self.targets)

    def take(self, idx) -> "PairwiseArrays":
        return PairwiseArrays(self.texts[idx], self.items_a[idx], self.items_b[idx], self.targets[idx],
                              self.groups[idx])

    def group_rows(self) -> list[np.ndarray]:
        _, inv = np.unique(self.groups, return_inverse=True)
        order = np.argsort(inv, kind="stable")
        bounds = np.flatnonzero(np.diff(inv[order])) + 1
        return np.split(order, bounds)


@dataclass
class RelevanceArrays:
    texts: np.ndarray
    items: np.ndarray
    ratings: np.ndarray

    def __len__(self) -> int:
        return len(self.ratings)

    def take(self, idx) -> "RelevanceArrays":
        return RelevanceArrays(self.texts[idx], self.items[idx], self.ratings[idx])


@dataclass
class SequentialArrays:
    texts: np.ndarray      # (B, text_dim)
    items: np.ndarray      # (B, H, L, M, item_dim)
    choices: np.ndarray    # (B, H)
    in_pairs: np.ndarray   # (B, H, P, 2) column indices
    in_targets: np.ndarray  # (B, H, P)
    cross_targets: np.ndarray  # (B, H - 1)

    def __len__(self) -> int:
        return len(self.choices)

    def take(self, idx) -> "SequentialArrays":
        return SequentialArrays(self.texts[idx], self.items[idx], self.choices[idx],
                                self.in_pairs[idx], self.in_targets[idx], self.cross_targets[idx])


def _embed_all(vocab: Vocabulary, prompts) -> np.ndarray:
    cache: dict = {}
    rows = []
    for p in prompts:
        if p not in cache:
            cache[p] = embed_prompt(vocab, p)
        rows.append(cache[p])
    return np.stack(rows)


def _group_ids(records: list[PairwiseRecord]) -> np.ndarray:
    """Dense group ids; records without a group each form their own."""
    ids, out = {}, np.empty(len(records), dtype=int)
    for i, r in enumerate(records):
        key = ("g", r.group) if r.group is not None else ("r", i)
        out[i] = ids.setdefault(key, len(ids))
    return out


def pairwise_arrays(vocab: Vocabulary, records: list[PairwiseRecord]) -> PairwiseArrays:
    return PairwiseArrays(_embed_all(vocab, [r.prompt for r in records]),
                          np.stack([r.item_a for r in records]).astype(float),
                          np.stack([r.item_b for r in records]).astype(float),
                          np.array([r.target for r in records], dtype=float),
                          _group_ids(records))


def relevance_arrays(vocab: Vocabulary, records: list[RelevanceRecord]) -> RelevanceArrays:
    return RelevanceArrays(_embed_all(vocab, [r.prompt for r in records]),
                           np.stack([r.item for r in records]).astype(float),
                           np.array([r.rating for r in records], dtype=float))


def sequential_arrays(vocab: Vocabulary, sessions: list[SequentialSession]) -> SequentialArrays:
    texts = _embed_all(vocab, [s.p0 for s in sessions])
    items = np.stack([np.stack([t.items for t in s.turns]) for s in sessions]).astype(float)
    choices = np.array([[t.choice for t in s.turns] for s in sessions], dtype=int)
    pairs = np.array([[[(a, b) for a, b, _ in t.in_turn] for t in s.turns] for s in sessions], dtype=int)
    in_y = np.array([[[y for _, _, y in t.in_turn] for t in s.turns] for s in sessions], dtype=float)
    cross = np.array([s.cross_turn for s in sessions], dtype=float).reshape(len(sessions), -1)
    return SequentialArrays(texts, items, choices, pairs, in_y, cross)


# ---------------------------------------------------------------------------
# objectives
# ---------------------------------------------------------------------------

def _bt_nll(gap: np.ndarray, target: np.ndarray) -> np.ndarray:
    return target * np.logaddexp(0.0, -gap) + (1.0 - target) * np.logaddexp(0.0, gap)


def _bt_nll_grad(gap: np.ndarray, target: np.ndarray) -> np.ndarray:
    return -target * sigmoid(-gap) + (1.0 - target) * sigmoid(gap)


class PairwiseObjective:
    """Bradley-Terry negative log-likelihood per (record, type)."""

    def __init__(self, model: UserModel, params: Params, batch: PairwiseArrays):
        self.model, self.batch = model, batch
        n = len(batch)
        items = np.concatenate([batch.items_a, batch.items_b])
        tidx = np.concatenate([np.arange(n), np.arange(n)])
        s, self.cache = model.score_forward(params, batch.texts, items, tidx)
        self.gap = s[:n] - s[n:]
        self.t = batch.targets[:, None]
        self.nll = _bt_nll(self.gap, self.t)

    @property
    def loglik(self) -> np.ndarray:
        return -self.nll

    def backward(self, weights: np.ndarray, train_base: bool = False) -> Params:
        d_gap = weights * _bt_nll_grad(self.gap, self.t)
        return self.model.score_backward(self.cache, np.concatenate([d_gap, -d_gap]), train_base)


class RelevanceObjective:
    """Gaussian rating model; ``nll = (s - rating)^2 / (2 nu^2)`` up to a constant."""

    def __init__(self, model: UserModel, params: Params, batch: RelevanceArrays, nu: float):
        self.model, self.nu = model, nu
        s, self.cache = model.score_forward(params, batch.texts, batch.items, np.arange(len(batch)))
        self.resid = s - batch.ratings[:, None]
        self.nll = self.resid ** 2 / (2.0 * nu ** 2)

    @property
    def loglik(self) -> np.ndarray:
        return -self.nll

    def backward(self, weights: np.ndarray, train_base: bool = False) -> Params:
        return self.model.score_backward(self.cache, weights * self.resid / self.nu ** 2, train_base)


class SequentialObjective:
    """Choice cross-entropy plus in-turn and cross-turn BT terms on best images.

    ``nll`` is the per-session loss ``L_cm + kappa2 L_in + kappa3 L_cross`` with
    each term averaged over its labels; ``loglik`` is the unweighted sum of
    all label log-likelihoods in the session, used for posteriors.
    """

    def __init__(self, model: UserModel, params: Params, batch: SequentialArrays,
                 kappa2: float, kappa3: float):
        self.model, self.params, self.kappa2, self.kappa3 = model, params, kappa2, kappa3
        cfg = model.config
        b, h, l, m, di = batch.items.shape
        k = model.n_types
        self.shape = (b, h, l, m, k)
        flat = batch.items.reshape(-1, di)
        tidx = np.repeat(np.arange(b), h * l * m)
        s, self.cache = model.score_forward(params, batch.texts, flat, tidx)
        s = s.reshape(b, h, l, m, k).transpose(0, 4, 1, 2, 3)  # (B, K, H, L, M)
        self.s = s
        self.r, self.agg_cache = aggregate(s, cfg.agg, cfg.agg_temperature)  # (B, K, H, L)
        self.tau, self.tau_cache = model.choice_temperature_forward(params, self.r)  # (B, K, H)
        logp = log_softmax(self.tau[..., None] * self.r, axis=-1)
        self.p = np.exp(logp)
        ch = np.broadcast_to(batch.choices[:, None, :], (b, k, h))
        self.onehot = np.zeros((b, k, h, l))
        np.put_along_axis(self.onehot, ch[..., None], 1.0, axis=-1)
        self.cm = -(logp * self.onehot).sum(axis=-1)  # (B, K, H)

        self.best_idx = np.argmax(s, axis=-1)
        best = np.take_along_axis(s, self.best_idx[..., None], axis=-1)[..., 0]  # (B, K, H, L)
        self.best = best
        pa = np.broadcast_to(batch.in_pairs[:, None, :, :, 0], (b, k) + batch.in_pairs.shape[1:3])
        pb = np.broadcast_to(batch.in_pairs[:, None, :, :, 1], pa.shape)
        self.pa, self.pb = pa, pb
        self.in_gap = np.take_along_axis(best, pa, axis=-1) - np.take_along_axis(best, pb, axis=-1)
        self.in_t = batch.in_targets[:, None]
        self.in_nll = _bt_nll(self.in_gap, self.in_t)  # (B, K, H, P)

        chosen_best = np.take_along_axis(best, ch[..., None], axis=-1)[..., 0]  # (B, K, H)
        self.ch = ch
        self.cross_gap = chosen_best[..., 1:] - chosen_best[..., :-1]
        self.cross_t = batch.cross_targets[:, None]
        self.cross_nll = _bt_nll(self.cross_gap, self.cross_t)  # (B, K, H-1)

        self.l_cm = self.cm.mean(axis=-1)
        self.l_in = self.in_nll.mean(axis=(-2, -1)) if self.in_nll.size else np.zeros((b, k))
        self.l_cross = self.cross_nll.mean(axis=-1) if h > 1 else np.zeros((b, k))
        self.nll = self.l_cm + kappa2 * self.l_in + kappa3 * self.l_cross
        self.loglik = -(self.cm.sum(axis=-1) + self.in_nll.sum(axis=(-2, -1)) + self.cross_nll.sum(axis=-1))

    def backward(self, weights: np.ndarray, train_base: bool = False) -> Params:
        cfg = self.model.config
        b, h, l, m, k = self.shape
        w = weights[..., None]  # (B, K, 1)
        d_logits = (w / h)[..., None] * (self.p - self.onehot)  # (B, K, H, L)
        d_r = self.tau[..., None] * d_logits
        d_tau = np.sum(d_logits * self.r, axis=-1)
        temp_grads, d_r_tau = self.model.choice_temperature_backward(self.tau_cache, d_tau)
        d_r = d_r + d_r_tau
        d_s = aggregate_backward(self.s, cfg.agg, cfg.agg_temperature, self.agg_cache, d_r)

        d_best = np.zeros_like(self.best)
        if self.in_nll.size:
            n_in = self.in_nll.shape[-1] * self.in_nll.shape[-2]
            d_gap = (self.kappa2 * w[..., None] / n_in) * _bt_nll_grad(self.in_gap, self.in_t)
            bi, ki, hi, _ = np.indices(self.pa.shape)
            np.add.at(d_best, (bi, ki, hi, self.pa), d_gap)
            np.add.at(d_best, (bi, ki, hi, self.pb), -d_gap)
        if h > 1:
            d_cg = (self.kappa3 * w / (h - 1)) * _bt_nll_grad(self.cross_gap, self.cross_t)  # (B,K,H-1)
            d_chosen = np.zeros((b, k, h))
            d_chosen[..., 1:] += d_cg
            d_chosen[..., :-1] -= d_cg
            bi, ki, hi = np.indices(self.ch.shape)
            np.add.at(d_best, (bi, ki, hi, self.ch), d_chosen)
        best_grad = np.zeros_like(self.s)
        np.put_along_axis(best_grad, self.best_idx[..., None], d_best[..., None], axis=-1)
        d_s = d_s + best_grad
        d_s_flat = d_s.transpose(0, 2, 3, 4, 1).reshape(-1, k)
        grads = self.model.score_backward(self.cache, d_s_flat, train_base)
        grads.update(temp_grads)
        return grads


def _merge(into: Params, extra: Params, scale: float = 1.0) -> Params:
    for k, v in extra.items():
        into[k] = into[k] + scale * v if k in into else scale * v
    return into


def _weights(gamma: np.ndarray) -> np.ndarray:
    return gamma / len(gamma)


def bt_loss(model: UserModel, params: Params, batch: PairwiseArrays, gamma: np.ndarray,
            train_base: bool = False) -> tuple[float, Params]:
    """``E_{i, k ~ gamma_i}[-log sigmoid(s_a - s_b)]`` and its gradient."""
    obj = PairwiseObjective(model, params, batch)
    w = _weights(gamma)
    return float(np.sum(w * obj.nll)), obj.backward(w, train_base)


def relevance_loss(model: UserModel, params: Params, batch: RelevanceArrays, gamma: np.ndarray,
                   nu: float, train_base: bool = False) -> tuple[float, Params]:
    obj = RelevanceObjective(model, params, batch, nu)
    w = _weights(gamma)
    return float(np.sum(w * obj.nll)), obj.backward(w, train_base)


def mixture_loss(model: UserModel, params: Params, pref: PairwiseArrays | None, gamma_pref,
                 rel: RelevanceArrays | None, gamma_rel, kappa1: float, nu: float,
                 train_base: bool = False) -> tuple[float, Params]:
    total, grads = 0.0, {}
    if pref is not None and len(pref):
        v, g = bt_loss(model, params, pref, gamma_pref, train_base)
        total += v
        _merge(grads, g)
    if rel is not None and len(rel):
        v, g = relevance_loss(model, params, rel, gamma_rel, nu, train_base)
        total += kappa1 * v
        _merge(grads, g, kappa1)
    return total, grads


def sequential_loss(model: UserModel, params: Params, batch: SequentialArrays, gamma: np.ndarray,
                    kappa2: float, kappa3: float, train_base: bool = False) -> tuple[float, Params]:
    obj = SequentialObjective(model, params, batch, kappa2, kappa3)
    w = _weights(gamma)
    return float(np.sum(w * obj.nll)), obj.backward(w, train_base)


# ---------------------------------------------------------------------------
# EM
# ---------------------------------------------------------------------------

@dataclass
class EmConfig:
    n_types: int = 4
    alpha_prior: float = 0.999
    target_period: int = 256
    batch_size: int = 256
    main_steps: int = 2000
    main_lr: float = 3e-3
    main_weight_decay: float = 1e-4
    main_grad_clip: float | None = None
    finetune_steps: int = 0
    finetune_batch_size: int = 8
    finetune_lr: float = 3e-4
    finetune_grad_clip: float | None = 0.5
    lr_floor_fraction: float = 0.1
    kappa1: float = 1.0
    kappa2: float = 0.01
    kappa3: float = 1.0
    nu: float = 0.5
    n_restarts: int = 1

    def __post_init__(self):
        if not 0.0 <= self.alpha_prior <= 1.0:
            raise ValueError("alpha_prior must be in [0, 1]")
        if self.n_restarts < 1:
            raise ValueError("n_restarts must be >= 1")
        if self.target_period < 1 or self.batch_size < 1:
            raise ValueError("target_period and batch_size must be positive")


@dataclass
class EmState:
    params: Params
    target_params: Params
    prior: np.ndarray
    opt: OptState
    step: int = 0
    skipped: int = 0


@dataclass
class EmBatch:
    pairwise: PairwiseArrays | None = None
    relevance: RelevanceArrays | None = None
    sequential: SequentialArrays | None = None


@dataclass
class PhaseSpec:
    lr: float
    period: int
    floor: float
    train_base: bool
    kappa1: float = 1.0
    kappa2: float = 0.01
    kappa3: float = 1.0
    nu: float = 0.5


def init_em_state(model: UserModel, hyper: OptHyper) -> EmState:
    k = model.n_types
    return EmState(copy_params(model.params), copy_params(model.params), np.full(k, 1.0 / k),
                   init_opt_state(model.params, hyper))


def _safe_posterior(prior: np.ndarray, loglik: np.ndarray):
    gamma = np.zeros_like(loglik)
    ok = np.ones(len(loglik), dtype=bool)
    for i in range(len(loglik)):
        try:
            gamma[i] = posterior_from_loglik(prior, loglik[i])
        except DegeneratePosteriorError:
            ok[i] = False
    return gamma, ok


def _estep(model: UserModel, target: Params, prior: np.ndarray, objective_cls, batch, *args):
    obj = objective_cls(model, target, batch, *args)
    loglik = obj.loglik
    if isinstance(batch, PairwiseArrays):
        _, inv = np.unique(batch.groups, return_inverse=True)
        summed = np.zeros((inv.max() + 1, loglik.shape[1]))
        np.add.at(summed, inv, loglik)
        loglik = summed[inv]
    if np.all(np.isfinite(loglik)):
        return posterior_from_loglik(prior, loglik), np.ones(len(loglik), dtype=bool)
    return _safe_posterior(prior, loglik)


def em_step(model: UserModel, state: EmState, batch: EmBatch, config: EmConfig,
            phase: PhaseSpec) -> tuple[EmState, dict]:
    """E-step on the target network, prior EMA, one optimizer step, periodic target refresh."""
    gammas, masks = {}, {}
    if batch.pairwise is not None and len(batch.pairwise):
        gammas["pairwise"], masks["pairwise"] = _estep(model, state.target_params, state.prior,
                                                       PairwiseObjective, batch.pairwise)
    if batch.relevance is not None and len(batch.relevance):
        gammas["relevance"], masks["relevance"] = _estep(model, state.target_params, state.prior,
                                                         RelevanceObjective, batch.relevance, phase.nu)
    if batch.sequential is not None and len(batch.sequential):
        gammas["sequential"], masks["sequential"] = _estep(
            model, state.target_params, state.prior, SequentialObjective, batch.sequential,
            phase.kappa2, phase.kappa3)
    if not gammas:
        raise ValueError("empty batch")
    skipped = sum(int((~m).sum()) for m in masks.values())
    all_gamma = np.concatenate([g[m] for g, m in zip(gammas.values(), masks.values())])
    prior = state.prior
    if len(all_gamma):
        prior = config.alpha_prior * prior + (1.0 - config.alpha_prior) * all_gamma.mean(axis=0)
        prior = prior / prior.sum()

    def masked(name, arrays):
        m = masks[name]
        return (arrays, gammas[name]) if m.all() else (arrays.take(np.flatnonzero(m)), gammas[name][m])

    terms, grads, total = {}, {}, 0.0
    if "pairwise" in gammas or "relevance" in gammas:
        pb, gp = masked("pairwise", batch.pairwise) if "pairwise" in gammas else (None, None)
        rb, gr = masked("relevance", batch.relevance) if "relevance" in gammas else (None, None)
        if pb is not None and len(pb):
            v, g = bt_loss(model, state.params, pb, gp, phase.train_base)
            terms["bt"] = v
            total += v
            _merge(grads, g)
        if rb is not None and len(rb):
            v, g = relevance_loss(model, state.params, rb, gr, phase.nu, phase.train_base)
            terms["rel"] = v
            total += phase.kappa1 * v
            _merge(grads, g, phase.kappa1)
    if "sequential" in gammas:
        sb, gs = masked("sequential", batch.sequential)
        if len(sb):
            v, g = sequential_loss(model, state.params, sb, gs, phase.kappa2, phase.kappa3, phase.train_base)
            terms["seq"] = v
            total += v
            _merge(grads, g)
    if not np.isfinite(total):
        raise FloatingPointError(f"non-finite EM loss at step {state.step}: {terms}")
    keep = set(model.trainable_keys(phase.train_base))
    grads = {k: v for k, v in grads.items() if k in keep}
    lr = cosine_lr(state.step, phase.lr, phase.period, phase.floor)
    params, opt = opt_step(state.params, grads, state.opt, learning_rate=lr)
    step = state.step + 1
    target = copy_params(params) if step % config.target_period == 0 else state.target_params
    info = {"loss": total, **terms, "grad_norm": global_norm(grads), "lr": lr, "skipped": skipped}
    return EmState(params, target, prior, opt, step, state.skipped + skipped), info


@dataclass
class EmResult:
    model: UserModel
    prior: np.ndarray
    log: list[dict] = field(default_factory=list)
    # training marginal log-likelihood per restart, when more than one was run
    restarts: list[float] = field(default_factory=list)


def _sample(n: int, size: int, rng: np.random.Generator) -> np.ndarray:
    return np.sort(rng.choice(n, size=min(size, n), replace=False))


class _GroupSampler:
    """Draws whole annotator groups until roughly ``size`` comparisons are collected."""

    def __init__(self, data: PairwiseArrays, size: int):
        self.rows = data.group_rows()
        mean = len(data) / len(self.rows)
        self.n_groups = max(1, min(len(self.rows), int(round(size / mean))))

    def __call__(self, rng: np.random.Generator) -> np.ndarray:
        pick = _sample(len(self.rows), self.n_groups, rng)
        return np.concatenate([self.rows[g] for g in pick])


def marginal_loglik(model: UserModel, pw: PairwiseArrays | None = None, rel: RelevanceArrays | None = None,
                    seq: SequentialArrays | None = None, nu: float = 0.5, kappa2: float = 0.01,
                    kappa3: float = 1.0) -> float:
    """Mean log-likelihood of the type mixture per independent unit (annotator group,
    relevance record, session)."""
    logp = np.log(np.maximum(model.prior, LIKELIHOOD_FLOOR))
    parts = []
    if pw is not None and len(pw):
        ll = PairwiseObjective(model, model.params, pw).loglik
        _, inv = np.unique(pw.groups, return_inverse=True)
        summed = np.zeros((inv.max() + 1, ll.shape[1]))
        np.add.at(summed, inv, ll)
        parts.append(summed)
    if rel is not None and len(rel):
        parts.append(RelevanceObjective(model, model.params, rel, nu).loglik)
    if seq is not None and len(seq):
        parts.append(SequentialObjective(model, model.params, seq, kappa2, kappa3).loglik)
    if not parts:
        raise ValueError("no data")
    return float(np.mean(logsumexp(logp + np.concatenate(parts), axis=-1)))


def fit(config: EmConfig, model_config: UserModelConfig, vocab: Vocabulary, datasets: LabeledDatasets,
        seed: int = 0, world_seed: int | None = None, init_model: UserModel | None = None) -> EmResult:
    """Two-phase EM: base-frozen training on single-turn data, then full fine-tuning on sessions.

    With ``n_restarts > 1`` the run is repeated from fresh initializations and
    the one with the highest training marginal log-likelihood is returned.
    """
    pw = pairwise_arrays(vocab, datasets.pairwise) if datasets.pairwise else None
    rel = relevance_arrays(vocab, datasets.relevance) if datasets.relevance else None
    seq = sequential_arrays(vocab, datasets.sequential) if datasets.sequential else None
    if pw is None and rel is None and seq is None:
        raise ValueError("no training data")
    best, lls = None, []
    for r in range(config.n_restarts):
        res = _fit_once(config, model_config, pw, rel, seq, seed, r, world_seed, init_model)
        if config.n_restarts == 1:
            return res
        lls.append(marginal_loglik(res.model, pw, rel, seq, config.nu, config.kappa2, config.kappa3))
        if lls[-1] == max(lls):
            best = res
    best.restarts = lls
    return best


def _fit_once(config: EmConfig, model_config: UserModelConfig, pw, rel, seq, seed: int, restart: int,
              world_seed: int | None, init_model: UserModel | None) -> EmResult:
    key = [int(seed)] if restart == 0 else [int(seed), 1000 + restart]
    rng = np.random.default_rng(key + [17])
    model = init_model.copy() if init_model is not None else UserModel.initialize(
        model_config, np.random.default_rng(key + [3]), world_seed)
    trace: list[dict] = []
    prior = np.full(model.n_types, 1.0 / model.n_types)
    phases = []
    if config.main_steps and (pw is not None or rel is not None):
        phases.append(("main", config.main_steps, config.batch_size,
                       OptHyper(config.main_lr, weight_decay=config.main_weight_decay,
                                grad_clip_norm=config.main_grad_clip), False))
    if config.finetune_steps and seq is not None:
        phases.append(("finetune", config.finetune_steps, config.finetune_batch_size,
                       OptHyper(config.finetune_lr, weight_decay=config.main_weight_decay,
                                grad_clip_norm=config.finetune_grad_clip), True))
    if not phases:
        raise ValueError("datasets do not cover any scheduled phase")
    model.prior = prior
    pw_sampler = _GroupSampler(pw, config.batch_size) if pw is not None else None
    for name, steps, bsize, hyper, train_base in phases:
        state = init_em_state(model, hyper)
        state.prior = model.prior.copy()
        spec = PhaseSpec(hyper.learning_rate, steps, config.lr_floor_fraction * hyper.learning_rate,
                         train_base, config.kappa1, config.kappa2, config.kappa3, config.nu)
        for _ in range(steps):
            if name == "main":
                batch = EmBatch(pairwise=pw.take(pw_sampler(rng)) if pw is not None else None,
                                relevance=rel.take(_sample(len(rel), bsize, rng)) if rel is not None else None)
            else:
                batch = EmBatch(sequential=seq.take(_sample(len(seq), bsize, rng)))
            state, info = em_step(model, state, batch, config, spec)
            info.update(phase=name, step=len(trace) + 1, prior=state.prior.tolist())
            trace.append(info)
        model = UserModel(model.config, state.params, state.prior.copy(), model.world_seed, model.frozen)
    return EmResult(model, model.prior.copy(), trace)


def fit_logistic_preference(model: UserModel, vocab: Vocabulary, records: list[PairwiseRecord],
                            steps: int, batch_size: int, hyper: OptHyper, seed: int,
                            lr_floor_fraction: float = 0.1) -> UserModel:
    """Plain Bradley-Terry regression for a single-type model, without any EM machinery."""
    if model.n_types != 1:
        raise ValueError("plain preference regression needs a single-type model")
    rng = np.random.default_rng([int(seed), 17])
    data = pairwise_arrays(vocab, records)
    sampler = _GroupSampler(data, batch_size)
    params, opt = copy_params(model.params), init_opt_state(model.params, hyper)
    keep = set(model.trainable_keys(False))
    for t in range(steps):
        batch = data.take(sampler(rng))
        obj = PairwiseObjective(model, params, batch)
        grads = obj.backward(np.full((len(batch), 1), 1.0 / len(batch)))
        grads = {k: v for k, v in grads.items() if k in keep}
        lr = cosine_lr(t, hyper.learning_rate, steps, lr_floor_fraction * hyper.learning_rate)
        params, opt = opt_step(params, grads, opt, learning_rate=lr)
    return UserModel(model.config, params, np.ones(1), model.world_seed, model.frozen)


def write_training_log(path, trace: list[dict]) -> None:
    """Tab-separated columns: step, phase, loss terms, grad norm, lr, prior entries."""
    if not trace:
        raise ValueError("empty trace")
    k = len(trace[0]["prior"])
    cols = ["step", "phase", "loss", "bt", "rel", "seq", "grad_norm", "lr", "skipped"] + \
        [f"prior_{j}" for j in range(k)]
    with open(path, "w") as fh:
        fh.write("\t".join(cols) + "\n")
        for row in trace:
            vals = [row["step"], row["phase"]] + [row.get(c, "") for c in cols[2:9]] + row["prior"]
            fh.write("\t".join(f"{v:.10g}" if isinstance(v, float) else str(v) for v in vals) + "\n")


# ---------------------------------------------------------------------------
# estimator facade
# ---------------------------------------------------------------------------

class MixtureUserModel(BaseEstimator):
    """Estimator wrapper around :func:`fit` for pipelines and parameter search.

    ``fit`` accepts a :class:`LabeledDatasets` or a list of pairwise records.
    ``score`` returns the rater-grouped held-out accuracy on a list of
    :class:`PairGroup` test samples.
    """

    def __init__(self, vocab: Vocabulary | None = None, n_types: int = 4, alpha_prior: float = 0.999,
                 main_steps: int = 2000, finetune_steps: int = 0, batch_size: int = 256,
                 learning_rate: float = 3e-3, target_period: int = 256, kappa1: float = 1.0,
                 kappa2: float = 0.01, kappa3: float = 1.0, nu: float = 0.5, embed_dim: int = 8,
                 agg: str = "softmax_sample", tie_threshold: float = 0.1, random_state: int = 0):
        self.vocab = vocab
        self.n_types = n_types
        self.alpha_prior = alpha_prior
        self.main_steps = main_steps
        self.finetune_steps = finetune_steps
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.target_period = target_period
        self.kappa1 = kappa1
        self.kappa2 = kappa2
        self.kappa3 = kappa3
        self.nu = nu
        self.embed_dim = embed_dim
        self.agg = agg
        self.tie_threshold = tie_threshold
        self.random_state = random_state

    def _check_vocab(self) -> Vocabulary:
        if self.vocab is None:
            raise ValueError("MixtureUserModel needs a vocabulary to embed prompts")
        return self.vocab

    def fit(self, X, y=None):
        vocab = self._check_vocab()
        data = X if isinstance(X, LabeledDatasets) else LabeledDatasets(pairwise=list(X))
        sample = (data.pairwise or data.relevance or [None])[0]
        if sample is not None:
            item_dim = len(sample.item_a if isinstance(sample, PairwiseRecord) else sample.item)
        else:
            item_dim = data.sequential[0].turns[0].items.shape[-1]
        slate = data.sequential[0].turns[0].items.shape[0] if data.sequential else 4
        mcfg = UserModelConfig(n_types=self.n_types, text_dim=vocab.embed_dim + 1, item_dim=item_dim,
                               embed_dim=self.embed_dim, slate_size=slate, agg=self.agg)
        ecfg = EmConfig(n_types=self.n_types, alpha_prior=self.alpha_prior,
                        target_period=self.target_period, batch_size=self.batch_size,
                        main_steps=self.main_steps, main_lr=self.learning_rate,
                        finetune_steps=self.finetune_steps, kappa1=self.kappa1, kappa2=self.kappa2,
                        kappa3=self.kappa3, nu=self.nu)
        res = fit(ecfg, mcfg, vocab, data, seed=self.random_state)
        self.model_, self.prior_, self.log_ = res.model, res.prior, res.log
        return self

    def _check_fitted(self) -> UserModel:
        if not hasattr(self, "model_"):
            raise NotFittedError("MixtureUserModel is not fitted yet")
        return self.model_

    def posterior(self, records: list[PairwiseRecord]) -> np.ndarray:
        """Posterior over types given a set of comparisons by one rater."""
        model = self._check_fitted()
        arr = pairwise_arrays(self._check_vocab(), records)
        ll = PairwiseObjective(model, model.params, arr).loglik.sum(axis=0)
        return model.posterior(ll)

    def predict_proba(self, records: list[PairwiseRecord]) -> np.ndarray:
        """Prior-averaged probability that the first item of each pair is preferred."""
        model = self._check_fitted()
        arr = pairwise_arrays(self._check_vocab(), records)
        obj = PairwiseObjective(model, model.params, arr)
        return sigmoid(obj.gap) @ model.prior

    def predict(self, records: list[PairwiseRecord]) -> np.ndarray:
        return np.where(self.predict_proba(records) >= 0.5, "a", "b")

    def score(self, X: list[PairGroup], y=None) -> float:
        from .evalharness import pickapic_accuracy
        return pickapic_accuracy(self._check_fitted(), self._check_vocab(), X, self.tie_threshold)
