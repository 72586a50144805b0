"""Small deterministic numeric kernel.

Dense layers with hand-written backward passes, stable softmax helpers,
an AdamW-style optimizer operating on ``dict[str, ndarray]`` parameter
trees, and a central finite-difference gradient checker.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

import numpy as np

ACTIVATIONS = ("relu", "tanh", "identity")

Params = dict[str, np.ndarray]


def _as_logits(logits) -> np.ndarray:
    x = np.asarray(logits, dtype=float)
    if x.size == 0 or x.shape[-1] == 0:
        raise ValueError("empty logits")
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite input")
    return x


def softmax(logits, axis: int = -1) -> np.ndarray:
    x = _as_logits(logits)
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax(logits, axis: int = -1) -> np.ndarray:
    x = _as_logits(logits)
    return x - logsumexp(x, axis=axis, keepdims=True)


def logsumexp(x, axis: int = -1, keepdims: bool = False) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    m = np.max(x, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True)) + m
    if not keepdims:
        out = np.squeeze(out, axis=axis)
    return out


def sigmoid(x):
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out if out.ndim else float(out)


def log_sigmoid(x):
    """log(sigmoid(x)) without overflow."""
    x = np.asarray(x, dtype=float)
    return -np.logaddexp(0.0, -x)


def softplus(x):
    return np.logaddexp(0.0, np.asarray(x, dtype=float))


# ---------------------------------------------------------------------------
# Dense networks
# ---------------------------------------------------------------------------

@dataclass
class MlpParams:
    """Weights are stored ``(in, out)`` so that ``y = x @ W + b``."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activations: list[str]

    def __post_init__(self):
        if not (len(self.weights) == len(self.biases) == len(self.activations)):
            raise ValueError("weights, biases and activations must have equal length")
        for i, (w, b, a) in enumerate(zip(self.weights, self.biases, self.activations)):
            if a not in ACTIVATIONS:
                raise ValueError(f"unknown activation {a!r}")
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ValueError(f"layer {i}: bias shape {b.shape} does not match weight {w.shape}")
            if i and self.weights[i - 1].shape[1] != w.shape[0]:
                raise ValueError(f"layer {i}: input dim {w.shape[0]} != previous output "
                                 f"{self.weights[i - 1].shape[1]}")

    @property
    def layer_dims(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[1]


def init_mlp(layer_dims: list[int], activations: list[str] | str, rng: np.random.Generator,
             scale: float = 1.0) -> MlpParams:
    """Glorot-style init; ``activations`` may be one name for hidden layers (last is identity)."""
    n = len(layer_dims) - 1
    if n < 1:
        raise ValueError("need at least two layer dims")
    if isinstance(activations, str):
        activations = [activations] * (n - 1) + ["identity"]
    ws, bs = [], []
    for din, dout in zip(layer_dims[:-1], layer_dims[1:]):
        std = scale * np.sqrt(2.0 / (din + dout))
        ws.append(rng.normal(0.0, std, size=(din, dout)))
        bs.append(np.zeros(dout))
    return MlpParams(ws, bs, list(activations))


def mlp_to_params(mlp: MlpParams, prefix: str) -> Params:
    out = {}
    for i, (w, b) in enumerate(zip(mlp.weights, mlp.biases)):
        out[f"{prefix}.W{i}"] = w
        out[f"{prefix}.b{i}"] = b
    return out


def mlp_view(params: Mapping[str, np.ndarray], prefix: str, activations: list[str]) -> MlpParams:
    """An MlpParams sharing storage with the entries of ``params``."""
    n = len(activations)
    return MlpParams([params[f"{prefix}.W{i}"] for i in range(n)],
                     [params[f"{prefix}.b{i}"] for i in range(n)], list(activations))


def _act(name: str, z: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    return z


def _act_grad(name: str, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    if name == "relu":
        return (z > 0).astype(float)
    if name == "tanh":
        return 1.0 - a * a
    return np.ones_like(z)


def mlp_forward(params: MlpParams, x, return_cache: bool = False):
    """Apply the network to a vector ``(d,)`` or a batch ``(n, d)``."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != params.in_dim:
        raise ValueError(f"input dim {x.shape[-1]} != first layer dim {params.in_dim}")
    h = x
    cache = [(x, None, None)]
    for w, b, act in zip(params.weights, params.biases, params.activations):
        z = h @ w + b
        h = _act(act, z)
        cache.append((h, z, act))
    if return_cache:
        return h, cache
    return h


def mlp_backward(params: MlpParams, cache, grad_out: np.ndarray):
    """Reverse pass. Returns ``(dW list, db list, d_input)``."""
    g = np.asarray(grad_out, dtype=float)
    dws: list[np.ndarray] = [None] * len(params.weights)  # type: ignore[list-item]
    dbs: list[np.ndarray] = [None] * len(params.weights)  # type: ignore[list-item]
    for i in range(len(params.weights) - 1, -1, -1):
        a, z, act = cache[i + 1]
        g = g * _act_grad(act, z, a)
        h_in = cache[i][0]
        if h_in.ndim == 1:
            dws[i] = np.outer(h_in, g)
            dbs[i] = g.copy()
        else:
            dws[i] = h_in.reshape(-1, h_in.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            dbs[i] = g.reshape(-1, g.shape[-1]).sum(axis=0)
        g = g @ params.weights[i].T
    return dws, dbs, g


def mlp_grads_to_params(dws, dbs, prefix: str) -> Params:
    out = {}
    for i, (dw, db) in enumerate(zip(dws, dbs)):
        out[f"{prefix}.W{i}"] = dw
        out[f"{prefix}.b{i}"] = db
    return out


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------

def grad_check(loss: Callable[[Params], tuple[float, Params]], params: Params, eps: float = 1e-5,
               keys: Iterable[str] | None = None, max_coords: int | None = None,
               rng: np.random.Generator | None = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss(params)`` must return ``(value, grads)``. Relative error is
    ``|analytic - numeric| / max(1, |numeric|)``. ``max_coords`` limits the
    number of coordinates probed per array (seeded subsample).
    """
    if not 0 < eps <= 1e-2:
        raise ValueError("eps must be in (0, 1e-2]")
    work = {k: np.array(v, dtype=float, copy=True) for k, v in params.items()}
    value, grads = loss(work)
    if not np.isfinite(value):
        raise ValueError("non-finite loss")
    rng = rng or np.random.default_rng(0)
    worst = 0.0
    for key in (list(keys) if keys is not None else sorted(work)):
        arr = work[key]
        g = np.asarray(grads.get(key, np.zeros_like(arr)), dtype=float).reshape(arr.shape)
        flat = arr.reshape(-1)
        idx = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            idx = rng.choice(flat.size, size=max_coords, replace=False)
        for j in idx:
            orig = flat[j]
            flat[j] = orig + eps
            lp, _ = loss(work)
            flat[j] = orig - eps
            lm, _ = loss(work)
            flat[j] = orig
            if not (np.isfinite(lp) and np.isfinite(lm)):
                raise ValueError("non-finite loss")
            num = (lp - lm) / (2.0 * eps)
            err = abs(g.reshape(-1)[j] - num) / max(1.0, abs(num))
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

@dataclass
class OptHyper:
    learning_rate: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 1e-4
    grad_clip_norm: float | None = None


@dataclass
class OptState:
    step: int = 0
    first_moment: Params = field(default_factory=dict)
    second_moment: Params = field(default_factory=dict)
    hyper: OptHyper = field(default_factory=OptHyper)


def init_opt_state(params: Params, hyper: OptHyper | None = None) -> OptState:
    return OptState(0, {k: np.zeros_like(v) for k, v in params.items()},
                    {k: np.zeros_like(v) for k, v in params.items()}, hyper or OptHyper())


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def clip_grads(grads: Mapping[str, np.ndarray], max_norm: float | None) -> Params:
    if max_norm is None:
        return dict(grads)
    norm = global_norm(grads)
    if norm <= max_norm or norm == 0.0:
        return dict(grads)
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}


def opt_step(params: Params, grads: Mapping[str, np.ndarray], state: OptState,
             learning_rate: float | None = None) -> tuple[Params, OptState]:
    """One AdamW step with decoupled weight decay.

    Only keys present in ``grads`` are updated, so frozen sub-networks are
    expressed by omitting their gradients. Inputs are not mutated.
    """
    for k, g in grads.items():
        if k not in params:
            raise ValueError(f"gradient for unknown parameter {k!r}")
        if np.shape(g) != params[k].shape:
            raise ValueError(f"shape mismatch for {k!r}: {np.shape(g)} vs {params[k].shape}")
        if not np.all(np.isfinite(g)):
            raise ValueError(f"non-finite gradient for {k!r}")
    hp = state.hyper
    lr = hp.learning_rate if learning_rate is None else learning_rate
    grads = clip_grads(grads, hp.grad_clip_norm)
    t = state.step + 1
    new_params = dict(params)
    m_all = dict(state.first_moment)
    v_all = dict(state.second_moment)
    bc1 = 1.0 - hp.beta1 ** t
    bc2 = 1.0 - hp.beta2 ** t
    for k in sorted(grads):
        g = np.asarray(grads[k], dtype=float)
        m = hp.beta1 * m_all.get(k, np.zeros_like(g)) + (1.0 - hp.beta1) * g
        v = hp.beta2 * v_all.get(k, np.zeros_like(g)) + (1.0 - hp.beta2) * g * g
        m_all[k], v_all[k] = m, v
        p = params[k] * (1.0 - lr * hp.weight_decay)
        new_params[k] = p - lr * (m / bc1) / (np.sqrt(v / bc2) + hp.epsilon)
    return new_params, OptState(t, m_all, v_all, copy.copy(hp))


def cosine_lr(step: int, base_lr: float, period: int, floor: float = 0.0) -> float:
    """Cosine annealing from ``base_lr`` to ``floor`` over ``period`` steps, then flat."""
    frac = min(step, period) / max(period, 1)
    return floor + (base_lr - floor) * 0.5 * (1.0 + np.cos(np.pi * frac))


def copy_params(params: Mapping[str, np.ndarray]) -> Params:
    return {k: np.array(v, copy=True) for k, v in params.items()}
