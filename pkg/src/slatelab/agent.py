"""Slate-decomposed value agent trained offline with implicit Q-learning.

A shared trunk reads ``history encoding + prompt embedding + prompt flag``
and feeds two linear heads: the prompt value ``f(h, p)`` and the state value
``v(h)`` (evaluated with a zero prompt slot and flag 0). A slate's value is
the mean of its prompt values, so the best category-feasible slate is found
by sorting candidates.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .candidates import BudgetSchedule, CandidateSet, word_budget
from .env import EnvConfig, History, Trajectory
from .numcore import (OptHyper, Params, copy_params, cosine_lr, global_norm, init_mlp, init_opt_state,
                      mlp_backward, mlp_forward, mlp_grads_to_params, mlp_to_params, mlp_view, opt_step)
from .selection import select_slate_indices
from .world import Prompt, Vocabulary, embed_prompt

log = logging.getLogger(__name__)

TRUNK_ACTS = ["tanh", "tanh"]
EXPECTILE_FORMS = ("squared", "linear")


# ---------------------------------------------------------------------------
# history features
# ---------------------------------------------------------------------------

class HistoryEncoder:
    """Fixed-size history features.

    ``embed(p0)``, the mean embedding of the chosen prompts, the mean choice
    contrast (chosen prompt minus the slate average, which isolates what the
    user picked over the alternatives), a turn one-hot and the remaining word
    budget as a fraction of the maximum.
    """

    def __init__(self, vocab: Vocabulary, horizon: int, max_words: int, budget_mode: str = "linear"):
        self.vocab, self.horizon, self.max_words, self.budget_mode = vocab, horizon, max_words, budget_mode
        self.text_dim = vocab.embed_dim + 1

    @property
    def dim(self) -> int:
        return 3 * self.text_dim + self.horizon + 2

    def budget(self, p0: Prompt, t: int) -> int:
        sched = BudgetSchedule(min(len(p0), self.max_words), self.max_words, self.horizon, self.budget_mode)
        return word_budget(sched, min(t + 1, self.horizon))

    def encode_parts(self, p0: Prompt, turns: list[tuple[tuple[Prompt, ...], int]]) -> np.ndarray:
        """``turns`` lists ``(slate, chosen index)`` pairs in order."""
        t = len(turns)
        if t > self.horizon:
            raise ValueError("history longer than the horizon")
        past, contrast = np.zeros(self.text_dim), np.zeros(self.text_dim)
        for slate, c in turns:
            e = np.stack([embed_prompt(self.vocab, p) for p in slate])
            past += e[c] / t
            contrast += (e[c] - e.mean(axis=0)) / t
        onehot = np.zeros(self.horizon + 1)
        onehot[t] = 1.0
        current = turns[-1][0][turns[-1][1]] if turns else p0
        remaining = max(self.budget(p0, t) - len(current), 0) / self.max_words
        return np.concatenate([embed_prompt(self.vocab, p0), past, contrast, onehot, [remaining]])

    def encode(self, history: History) -> np.ndarray:
        return self.encode_parts(history.p0, [(tr.slate, tr.choice) for tr in history.turns])


# ---------------------------------------------------------------------------
# network
# ---------------------------------------------------------------------------

@dataclass
class AgentConfig:
    hidden: int = 64
    alpha: float = 0.7
    expectile_form: str = "squared"
    prefix_training: bool = True
    # evenly spaced prefix depths per transition, always including the full slate; 0 keeps all
    max_prefix_depths: int = 4
    target_period: int = 256
    grad_clip: float = 1.0
    learning_rate: float = 1e-3
    lr_floor_fraction: float = 0.1
    weight_decay: float = 1e-4
    batch_size: int = 256
    steps: int = 8000
    checkpoint_every: int = 0

    def __post_init__(self):
        if not 0.5 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0.5, 1]")
        if self.expectile_form not in EXPECTILE_FORMS:
            raise ValueError(f"unknown expectile form {self.expectile_form!r}")
        if self.max_prefix_depths < 0:
            raise ValueError("max_prefix_depths must be >= 0")
        if self.target_period < 1 or self.batch_size < 1 or self.steps < 0:
            raise ValueError("target_period, batch_size must be positive and steps >= 0")


def init_agent_params(in_dim: int, hidden: int, rng: np.random.Generator) -> Params:
    p = mlp_to_params(init_mlp([in_dim, hidden, hidden], TRUNK_ACTS, rng), "trunk")
    for head in ("q_head", "v_head"):
        p[f"{head}.W0"] = rng.normal(0.0, 1.0 / np.sqrt(hidden), size=(hidden, 1)) * 0.1
        p[f"{head}.b0"] = np.zeros(1)
    return p


def _trunk_forward(params: Params, x: np.ndarray):
    return mlp_forward(mlp_view(params, "trunk", TRUNK_ACTS), x, return_cache=True)


def _q_inputs(enc: np.ndarray, prompt_emb: np.ndarray) -> np.ndarray:
    return np.concatenate([enc, prompt_emb, np.ones((len(enc), 1))], axis=1)


def _v_inputs(enc: np.ndarray, text_dim: int) -> np.ndarray:
    return np.concatenate([enc, np.zeros((len(enc), text_dim + 1))], axis=1)


def _q_forward(params: Params, enc: np.ndarray, prompt_emb: np.ndarray) -> np.ndarray:
    """Prompt values ``(n,)`` for row-aligned encodings and prompt embeddings."""
    hid, _ = _trunk_forward(params, _q_inputs(enc, prompt_emb))
    return (hid @ params["q_head.W0"] + params["q_head.b0"])[:, 0]


def _v_forward(params: Params, enc: np.ndarray) -> np.ndarray:
    text_dim = params["trunk.W0"].shape[0] - enc.shape[1] - 1
    hid, _ = _trunk_forward(params, _v_inputs(enc, text_dim))
    return (hid @ params["v_head.W0"] + params["v_head.b0"])[:, 0]


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def expectile_loss(x: np.ndarray, alpha: float, form: str = "squared") -> tuple[np.ndarray, np.ndarray]:
    """Per-element asymmetric loss and its derivative in ``x``.

    ``squared``: ``|alpha - 1[x<0]| x^2``, minimized at the alpha-expectile.
    ``linear``: ``|alpha - 1[x<0]| x`` as literally printed; unbounded below.
    """
    w = np.where(x < 0, 1.0 - alpha, alpha)
    if form == "squared":
        return w * x * x, 2.0 * w * x
    if form == "linear":
        return w * x, w
    raise ValueError(f"unknown expectile form {form!r}")


@dataclass
class TransitionBatch:
    """Encoded transitions. Row ``i`` of the q-rows belongs to transition
    ``q_owner[i]`` and to the (transition, prefix depth) block ``q_block[i]``;
    each block holds exactly ``slate_size`` rows."""

    enc: np.ndarray  # (B, E)
    next_enc: np.ndarray  # (B, E)
    reward: np.ndarray  # (B,)
    terminal: np.ndarray  # (B,) bool
    q_prompt_emb: np.ndarray  # (R, text_dim)
    q_owner: np.ndarray  # (R,)
    q_block: np.ndarray  # (R,) index of the (transition, depth) block
    block_owner: np.ndarray  # (NB,)

    def __len__(self) -> int:
        return len(self.reward)


def iql_loss(params: Params, target: Params, batch: TransitionBatch, alpha: float,
             expectile_form: str = "squared") -> tuple[float, Params, dict]:
    """TD regression of slate values plus expectile regression of the state value.

    The TD target uses the target copy of ``v``; the expectile term uses the
    target copy of ``q``. With several prefix depths per transition the TD
    residuals are averaged over depths before averaging over the batch.
    """
    b = len(batch)
    text_dim = batch.q_prompt_emb.shape[1]
    nb = len(batch.block_owner)
    counts = np.bincount(batch.q_block, minlength=nb).astype(float)
    depths = np.bincount(batch.block_owner, minlength=b).astype(float)

    # TD term on the online q
    q_in = _q_inputs(batch.enc[batch.q_owner], batch.q_prompt_emb)
    hq, qcache = _trunk_forward(params, q_in)
    f = (hq @ params["q_head.W0"] + params["q_head.b0"])[:, 0]
    q_block = np.bincount(batch.q_block, weights=f, minlength=nb) / counts
    v_next = _v_forward(target, batch.next_enc)
    y = batch.reward + np.where(batch.terminal, 0.0, v_next)
    resid = q_block - y[batch.block_owner]
    block_w = 1.0 / (depths[batch.block_owner] * b)
    td = float(np.sum(block_w * resid ** 2))

    # expectile term on the online v
    v_in = _v_inputs(batch.enc, text_dim)
    hv, vcache = _trunk_forward(params, v_in)
    v = (hv @ params["v_head.W0"] + params["v_head.b0"])[:, 0]
    ft = _q_forward(target, batch.enc[batch.q_owner], batch.q_prompt_emb)
    qt_block = np.bincount(batch.q_block, weights=ft, minlength=nb) / counts
    # the expectile uses the full slate (deepest prefix) per transition
    last = np.zeros(b, dtype=int)
    np.maximum.at(last, batch.block_owner, np.arange(nb))
    x = qt_block[last] - v
    ev, ed = expectile_loss(x, alpha, expectile_form)
    ex = float(np.mean(ev))

    # backward
    d_block = 2.0 * block_w * resid
    d_f = (d_block / counts)[batch.q_block]
    d_v = -ed / b
    grads: Params = {
        "q_head.W0": hq.T @ d_f[:, None], "q_head.b0": np.array([d_f.sum()]),
        "v_head.W0": hv.T @ d_v[:, None], "v_head.b0": np.array([d_v.sum()]),
    }
    trunk = mlp_view(params, "trunk", TRUNK_ACTS)
    dws_q, dbs_q, _ = mlp_backward(trunk, qcache, d_f[:, None] @ params["q_head.W0"].T)
    dws_v, dbs_v, _ = mlp_backward(trunk, vcache, d_v[:, None] @ params["v_head.W0"].T)
    grads.update(mlp_grads_to_params([a + c for a, c in zip(dws_q, dws_v)],
                                     [a + c for a, c in zip(dbs_q, dbs_v)], "trunk"))
    return td + ex, grads, {"td": td, "expectile": ex}


# ---------------------------------------------------------------------------
# transitions from trajectories
# ---------------------------------------------------------------------------

@dataclass
class TransitionTable:
    """All transitions of an offline dataset with precomputed features."""

    enc: np.ndarray
    next_enc: np.ndarray
    reward: np.ndarray
    terminal: np.ndarray
    # per transition, a list of (depth, slate_size, text_dim) prefix embeddings
    prefix_emb: list[np.ndarray]

    def __len__(self) -> int:
        return len(self.reward)

    def batch(self, idx: np.ndarray) -> TransitionBatch:
        rows, owner, block, block_owner = [], [], [], []
        nb = 0
        for j, i in enumerate(idx):
            pe = self.prefix_emb[i]
            d, ls, _ = pe.shape
            rows.append(pe.reshape(d * ls, -1))
            owner.append(np.full(d * ls, j))
            block.append(nb + np.repeat(np.arange(d), ls))
            block_owner.append(np.full(d, j))
            nb += d
        return TransitionBatch(self.enc[idx], self.next_enc[idx], self.reward[idx], self.terminal[idx],
                               np.concatenate(rows), np.concatenate(owner), np.concatenate(block),
                               np.concatenate(block_owner))


def prompt_prefixes(base: Prompt, prompt: Prompt) -> list[Prompt]:
    """``base`` extended by each non-empty prefix of the appended tokens."""
    n = len(base)
    if prompt[:n] != tuple(base):
        raise ValueError("prompt does not extend its base")
    if len(prompt) == n:
        return [tuple(prompt)]
    return [tuple(prompt[: n + j]) for j in range(1, len(prompt) - n + 1)]


def prefix_depths(depth: int, max_depths: int = 0) -> list[int]:
    """Depth indices ``0..depth-1`` thinned to at most ``max_depths`` evenly spaced ones."""
    if max_depths <= 0 or depth <= max_depths:
        return list(range(depth))
    return sorted({int(round(x)) for x in np.linspace(0, depth - 1, max_depths)})


def slate_prefix_embeddings(vocab: Vocabulary, base: Prompt, slate, prefix: bool,
                            max_depths: int = 0) -> np.ndarray:
    """``(depth, L, text_dim)``: row ``j`` truncates each prompt to ``j + 1`` appended tokens
    (or keeps it whole when shorter). Without ``prefix`` only the full slate is returned."""
    if not prefix:
        return np.stack([embed_prompt(vocab, p) for p in slate])[None]
    per = [prompt_prefixes(base, p) for p in slate]
    depth = max(len(x) for x in per)
    cache: dict[Prompt, np.ndarray] = {}

    def emb(p):
        if p not in cache:
            cache[p] = embed_prompt(vocab, p)
        return cache[p]

    return np.stack([np.stack([emb(x[min(j, len(x) - 1)]) for x in per])
                     for j in prefix_depths(depth, max_depths)])


def build_transitions(encoder: HistoryEncoder, trajectories: list[Trajectory],
                      prefix: bool = True, max_depths: int = 0) -> TransitionTable:
    enc, nxt, rew, term, pref = [], [], [], [], []
    for tr in trajectories:
        seen: list[tuple[tuple[Prompt, ...], int]] = []
        h = len(tr.turns)
        for t, turn in enumerate(tr.turns):
            enc.append(encoder.encode_parts(tr.p0, seen))
            pref.append(slate_prefix_embeddings(encoder.vocab, turn.candidates.base, turn.slate, prefix,
                                                max_depths))
            seen = seen + [(turn.slate, turn.choice)]
            nxt.append(encoder.encode_parts(tr.p0, seen))
            rew.append(turn.reward)
            term.append(t == h - 1)
    if not enc:
        raise ValueError("no transitions")
    return TransitionTable(np.array(enc), np.array(nxt), np.array(rew, dtype=float),
                           np.array(term, dtype=bool), pref)


# ---------------------------------------------------------------------------
# agent
# ---------------------------------------------------------------------------

@dataclass
class SlateAgent:
    encoder: HistoryEncoder
    config: AgentConfig
    params: Params
    env_config: EnvConfig = field(default_factory=EnvConfig)

    @classmethod
    def initialize(cls, vocab: Vocabulary, env_config: EnvConfig, max_words: int, config: AgentConfig,
                   rng: np.random.Generator) -> "SlateAgent":
        enc = HistoryEncoder(vocab, env_config.horizon, max_words, env_config.budget_mode)
        params = init_agent_params(enc.dim + enc.text_dim + 1, config.hidden, rng)
        return cls(enc, config, params, env_config)

    def prompt_values(self, history: History, prompts) -> np.ndarray:
        e = self.encoder.encode(history)
        pe = np.stack([embed_prompt(self.encoder.vocab, p) for p in prompts])
        return _q_forward(self.params, np.repeat(e[None], len(pe), axis=0), pe)

    def prompt_value(self, history: History, prompt: Prompt) -> float:
        return float(self.prompt_values(history, [prompt])[0])

    def slate_value(self, history: History, slate) -> float:
        if len(slate) != self.env_config.slate_size:
            raise ValueError(f"slate must hold {self.env_config.slate_size} prompts")
        return float(np.mean(self.prompt_values(history, slate)))

    def state_value(self, history: History) -> float:
        return float(_v_forward(self.params, self.encoder.encode(history)[None])[0])

    def select_slate(self, history: History, candidates: CandidateSet, n_slate: int | None = None) -> list[int]:
        n_slate = n_slate or self.env_config.slate_size
        return select_slate_indices(self.prompt_values(history, candidates.prompts), candidates.categories,
                                    n_slate)

    def policy(self) -> "GreedyPolicy":
        return GreedyPolicy(self)

    # -- persistence ----------------------------------------------------

    def to_dict(self) -> dict:
        return {"kind": "agent", "config": asdict(self.config), "env": asdict(self.env_config),
                "max_words": self.encoder.max_words,
                "params": {k: {"shape": list(v.shape), "data": v.reshape(-1).tolist()}
                           for k, v in sorted(self.params.items())}}

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict, vocab: Vocabulary) -> "SlateAgent":
        if d.get("kind") != "agent":
            raise ValueError("not an agent checkpoint")
        env = EnvConfig(**d["env"])
        enc = HistoryEncoder(vocab, env.horizon, int(d["max_words"]), env.budget_mode)
        params = {k: np.asarray(v["data"], dtype=float).reshape(v["shape"]) for k, v in d["params"].items()}
        if params["trunk.W0"].shape[0] != enc.dim + enc.text_dim + 1:
            raise ValueError("checkpoint does not match the vocabulary's embedding size")
        return cls(enc, AgentConfig(**d["config"]), params, env)

    @classmethod
    def load(cls, path, vocab: Vocabulary) -> "SlateAgent":
        with open(path) as fh:
            return cls.from_dict(json.load(fh), vocab)


class GreedyPolicy:
    name = "trained"

    def __init__(self, agent: SlateAgent):
        self.agent = agent

    def select(self, history: History, candidates: CandidateSet, n_slate: int,
               rng: np.random.Generator) -> list[int]:
        return self.agent.select_slate(history, candidates, n_slate)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class AgentTrainResult:
    agent: SlateAgent
    log: list[dict]


def iql_update(params: Params, target: Params, opt, batch: TransitionBatch, config: AgentConfig,
               step: int) -> tuple[Params, Params, object, dict]:
    loss, grads, terms = iql_loss(params, target, batch, config.alpha, config.expectile_form)
    if not np.isfinite(loss):
        raise FloatingPointError(f"non-finite IQL loss at step {step}")
    lr = cosine_lr(step, config.learning_rate, config.steps, config.lr_floor_fraction * config.learning_rate)
    params, opt = opt_step(params, grads, opt, learning_rate=lr)
    if (step + 1) % config.target_period == 0:
        target = copy_params(params)
    return params, target, opt, {"step": step + 1, "loss": loss, **terms, "grad_norm": global_norm(grads),
                                 "lr": lr}


def train_agent(agent: SlateAgent, trajectories: list[Trajectory], seed: int,
                checkpoint_path=None) -> AgentTrainResult:
    """Minibatch IQL over the transitions of ``trajectories``."""
    if not trajectories:
        raise ValueError("empty trajectory set")
    for tr in trajectories:
        if len(tr.turns) != agent.env_config.horizon:
            raise ValueError(f"trajectory {tr.episode_id} has {len(tr.turns)} turns, "
                             f"expected {agent.env_config.horizon}")
        for turn in tr.turns:
            if len(turn.slate_indices) != agent.env_config.slate_size:
                raise ValueError(f"trajectory {tr.episode_id}: slate size does not match the agent")
    c = agent.config
    table = build_transitions(agent.encoder, trajectories, c.prefix_training, c.max_prefix_depths)
    rng = np.random.default_rng([int(seed), 31])
    params = copy_params(agent.params)
    target = copy_params(params)
    opt = init_opt_state(params, OptHyper(c.learning_rate, weight_decay=c.weight_decay,
                                          grad_clip_norm=c.grad_clip))
    trace = []
    for step in range(c.steps):
        idx = rng.choice(len(table), size=min(c.batch_size, len(table)), replace=False)
        params, target, opt, info = iql_update(params, target, opt, table.batch(np.sort(idx)), c, step)
        trace.append(info)
        if checkpoint_path is not None and c.checkpoint_every and (step + 1) % c.checkpoint_every == 0:
            SlateAgent(agent.encoder, c, params, agent.env_config).save(checkpoint_path)
    out = SlateAgent(agent.encoder, c, params, agent.env_config)
    if checkpoint_path is not None:
        out.save(checkpoint_path)
    return AgentTrainResult(out, trace)


def write_loss_trace(path, trace: list[dict]) -> None:
    cols = ["step", "loss", "td", "expectile", "grad_norm", "lr"]
    with open(path, "w") as fh:
        fh.write("\t".join(cols) + "\n")
        for row in trace:
            fh.write("\t".join(f"{row[c]:.10g}" if isinstance(row[c], float) else str(row[c]) for c in cols) + "\n")


def fit_state_value(params: Params, encodings: np.ndarray, targets: np.ndarray, alpha: float,
                    steps: int, batch_size: int, seed: int, learning_rate: float = 1e-2,
                    expectile_form: str = "squared") -> Params:
    """Regress only the state-value path onto fixed targets with the expectile loss.

    ``v`` converges to the alpha-expectile of the targets sharing an encoding.
    """
    rng = np.random.default_rng([int(seed), 37])
    params = copy_params(params)
    keys = [k for k in params if not k.startswith("q_head")]
    opt = init_opt_state(params, OptHyper(learning_rate, weight_decay=0.0))
    text_dim = params["trunk.W0"].shape[0] - encodings.shape[1] - 1
    for step in range(steps):
        idx = rng.choice(len(targets), size=min(batch_size, len(targets)), replace=False)
        hv, cache = _trunk_forward(params, _v_inputs(encodings[idx], text_dim))
        v = (hv @ params["v_head.W0"] + params["v_head.b0"])[:, 0]
        _, ed = expectile_loss(targets[idx] - v, alpha, expectile_form)
        d_v = -ed / len(idx)
        dws, dbs, _ = mlp_backward(mlp_view(params, "trunk", TRUNK_ACTS), cache,
                                   d_v[:, None] @ params["v_head.W0"].T)
        grads = mlp_grads_to_params(dws, dbs, "trunk")
        grads.update({"v_head.W0": hv.T @ d_v[:, None], "v_head.b0": np.array([d_v.sum()])})
        lr = cosine_lr(step, learning_rate, steps, 0.01 * learning_rate)
        params, opt = opt_step(params, {k: grads[k] for k in keys}, opt, learning_rate=lr)
    return params


# ---------------------------------------------------------------------------
# estimator facade
# ---------------------------------------------------------------------------

class SlateIQLAgent(BaseEstimator):
    """Fit on offline trajectories; ``predict`` maps ``(history, candidates)`` pairs to slates."""

    def __init__(self, vocab: Vocabulary | None = None, max_words: int = 62, horizon: int = 5,
                 slate_size: int = 4, alpha: float = 0.7, steps: int = 8000, batch_size: int = 256,
                 learning_rate: float = 1e-3, hidden: int = 64, prefix_training: bool = True,
                 random_state: int = 0):
        self.vocab = vocab
        self.max_words = max_words
        self.horizon = horizon
        self.slate_size = slate_size
        self.alpha = alpha
        self.steps = steps
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.hidden = hidden
        self.prefix_training = prefix_training
        self.random_state = random_state

    def fit(self, X: list[Trajectory], y=None):
        if self.vocab is None:
            raise ValueError("vocab is required")
        cfg = AgentConfig(hidden=self.hidden, alpha=self.alpha, steps=self.steps, batch_size=self.batch_size,
                          learning_rate=self.learning_rate, prefix_training=self.prefix_training)
        env = EnvConfig(horizon=self.horizon, slate_size=self.slate_size)
        agent = SlateAgent.initialize(self.vocab, env, self.max_words, cfg,
                                      np.random.default_rng([int(self.random_state), 29]))
        res = train_agent(agent, list(X), self.random_state)
        self.agent_, self.log_ = res.agent, res.log
        return self

    def predict(self, X) -> list[list[int]]:
        if not hasattr(self, "agent_"):
            raise NotFittedError("SlateIQLAgent is not fitted yet")
        return [self.agent_.select_slate(h, c, self.slate_size) for h, c in X]
