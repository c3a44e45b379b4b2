"""Small dense networks with hand-rolled backprop, Adam, and a Gaussian policy head.

Everything here is plain numpy on float64. Functions take explicit parameter
structs and RNGs; there is no module-level mutable state, so two nets never
interfere and seeded runs are bit-reproducible.
"""

from __future__ import annotations

import base64
from dataclasses import dataclass, field

import numpy as np

LOG_STD_INIT = -0.7
LOG_STD_MIN = -5.0
LOG_STD_MAX = 1.0

CHECKPOINT_VERSION = 1


@dataclass
class NetParams:
    """Weights/biases per layer; log_std present only on policy heads."""

    layer_sizes: tuple
    weights: list
    biases: list
    log_std: np.ndarray | None = None


@dataclass
class NetGrads:
    weights: list
    biases: list
    log_std: np.ndarray | None = None


@dataclass
class AdamState:
    step: int
    m_w: list
    v_w: list
    m_b: list
    v_b: list
    m_ls: np.ndarray | None = None
    v_ls: np.ndarray | None = None


def mlp_init(layer_sizes, seed, policy_head=False):
    """Build an MLP with tanh hidden layers and a linear output layer.

    Weights are zero-mean normal scaled by 1/sqrt(fan_in), biases zero.
    policy_head adds a state-independent log-std vector initialised at
    LOG_STD_INIT (one entry per output).
    """
    if len(layer_sizes) < 2:
        raise ValueError("need at least input and output sizes")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        weights.append(rng.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in))
        biases.append(np.zeros(fan_out))
    log_std = np.full(layer_sizes[-1], LOG_STD_INIT) if policy_head else None
    return NetParams(tuple(layer_sizes), weights, biases, log_std)


def mlp_forward(params, x):
    """Forward pass. Accepts a single observation vector or an (M, d) batch.

    Returns (output, cache); the output layer is linear, hidden layers tanh.
    The cache holds per-layer activations for mlp_backprop.
    """
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    a = x.reshape(1, -1) if squeeze else x
    if a.shape[1] != params.layer_sizes[0]:
        raise ValueError(f"input width {a.shape[1]} != {params.layer_sizes[0]}")
    acts = [a]
    n_layers = len(params.weights)
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = a @ w + b
        a = z if i == n_layers - 1 else np.tanh(z)
        acts.append(a)
    cache = (params.layer_sizes, acts, squeeze)
    out = a[0] if squeeze else a
    return out, cache


def mlp_backprop(params, cache, grad_out):
    """Backprop grad_out (dL/doutput) through a cached forward pass.

    Gradients are summed over the batch; callers fold any 1/M into grad_out.
    Raises if the cache does not belong to a net of this shape.
    """
    sizes, acts, squeeze = cache
    if sizes != params.layer_sizes:
        raise ValueError("cache does not match network shape")
    g = np.asarray(grad_out, dtype=np.float64)
    if squeeze:
        g = g.reshape(1, -1)
    if g.shape != acts[-1].shape:
        raise ValueError(f"grad shape {g.shape} != output shape {acts[-1].shape}")
    gw = [None] * len(params.weights)
    gb = [None] * len(params.biases)
    for i in range(len(params.weights) - 1, -1, -1):
        gw[i] = acts[i].T @ g
        gb[i] = g.sum(axis=0)
        if i > 0:
            # acts[i] is tanh output of the previous hidden layer
            g = (g @ params.weights[i].T) * (1.0 - acts[i] ** 2)
    return NetGrads(gw, gb, None)


def adam_init(params):
    return AdamState(
        0,
        [np.zeros_like(w) for w in params.weights],
        [np.zeros_like(w) for w in params.weights],
        [np.zeros_like(b) for b in params.biases],
        [np.zeros_like(b) for b in params.biases],
        np.zeros_like(params.log_std) if params.log_std is not None else None,
        np.zeros_like(params.log_std) if params.log_std is not None else None,
    )


def _adam_update(p, g, m, v, lr, t, beta1, beta2, eps):
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * g * g
    m_hat = m / (1.0 - beta1**t)
    v_hat = v / (1.0 - beta2**t)
    p -= lr * m_hat / (np.sqrt(v_hat) + eps)


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One Adam update, in place. Keeps log_std inside [LOG_STD_MIN, LOG_STD_MAX]."""
    state.step += 1
    t = state.step
    for i in range(len(params.weights)):
        _adam_update(params.weights[i], grads.weights[i], state.m_w[i], state.v_w[i], lr, t, beta1, beta2, eps)
        _adam_update(params.biases[i], grads.biases[i], state.m_b[i], state.v_b[i], lr, t, beta1, beta2, eps)
    if params.log_std is not None and grads.log_std is not None:
        _adam_update(params.log_std, grads.log_std, state.m_ls, state.v_ls, lr, t, beta1, beta2, eps)
        np.clip(params.log_std, LOG_STD_MIN, LOG_STD_MAX, out=params.log_std)


def clone_params(params):
    return NetParams(
        params.layer_sizes,
        [w.copy() for w in params.weights],
        [b.copy() for b in params.biases],
        None if params.log_std is None else params.log_std.copy(),
    )


def clone_adam(state):
    return AdamState(
        state.step,
        [m.copy() for m in state.m_w],
        [v.copy() for v in state.v_w],
        [m.copy() for m in state.m_b],
        [v.copy() for v in state.v_b],
        None if state.m_ls is None else state.m_ls.copy(),
        None if state.v_ls is None else state.v_ls.copy(),
    )


def copy_into(dst, src):
    """Copy parameter values of src into dst without rebinding arrays."""
    for wd, ws in zip(dst.weights, src.weights):
        wd[...] = ws
    for bd, bs in zip(dst.biases, src.biases):
        bd[...] = bs
    if dst.log_std is not None:
        dst.log_std[...] = src.log_std


# ---------------------------------------------------------------------------
# Diagonal Gaussian policy head


def policy_mean(params, obs):
    """Deterministic action: tanh of the net output, so always inside (-1, 1)."""
    out, _ = mlp_forward(params, obs)
    return np.tanh(out)


def gaussian_logprob(raw, mean, log_std):
    """Log density of a diagonal Gaussian, summed over action dims.

    Works on single vectors or batches (last axis = action dims).
    """
    var = np.exp(2.0 * log_std)
    d = raw - mean
    dim_terms = -0.5 * d * d / var - log_std - 0.5 * np.log(2.0 * np.pi)
    return dim_terms.sum(axis=-1)


def policy_sample(params, obs, rng):
    """Sample an action for one observation.

    Returns (action, raw, log_prob): raw is the unclamped Gaussian draw around
    tanh(net output); action is raw clamped to [-1, 1]; log_prob is the
    Gaussian density of raw (not of the clamped action). Rollout code stores
    raw so the density can be recomputed exactly later.
    """
    mean = policy_mean(params, obs)
    std = np.exp(params.log_std)
    raw = mean + std * rng.standard_normal(mean.shape)
    action = np.clip(raw, -1.0, 1.0)
    return action, raw, gaussian_logprob(raw, mean, params.log_std)


def policy_logprob(params, obs, raw_action):
    """Recompute log density of stored unclamped samples under current params."""
    mean = policy_mean(params, obs)
    return gaussian_logprob(np.asarray(raw_action, dtype=np.float64), mean, params.log_std)


# ---------------------------------------------------------------------------
# Serialization (bit-exact round trip)


def _encode(arr):
    a = np.ascontiguousarray(arr, dtype=np.float64)
    return {"shape": list(a.shape), "data": base64.b64encode(a.tobytes()).decode("ascii")}


def _decode(doc):
    a = np.frombuffer(base64.b64decode(doc["data"]), dtype=np.float64).copy()
    return a.reshape(doc["shape"])


def save_net(params, adam=None):
    doc = {
        "version": CHECKPOINT_VERSION,
        "kind": "mlp",
        "layer_sizes": list(params.layer_sizes),
        "weights": [_encode(w) for w in params.weights],
        "biases": [_encode(b) for b in params.biases],
        "log_std": None if params.log_std is None else _encode(params.log_std),
    }
    if adam is not None:
        doc["adam"] = {
            "step": adam.step,
            "m_w": [_encode(a) for a in adam.m_w],
            "v_w": [_encode(a) for a in adam.v_w],
            "m_b": [_encode(a) for a in adam.m_b],
            "v_b": [_encode(a) for a in adam.v_b],
            "m_ls": None if adam.m_ls is None else _encode(adam.m_ls),
            "v_ls": None if adam.v_ls is None else _encode(adam.v_ls),
        }
    return doc


def load_net(doc):
    if doc.get("version") != CHECKPOINT_VERSION or doc.get("kind") != "mlp":
        raise ValueError(f"unsupported net document: version={doc.get('version')!r} kind={doc.get('kind')!r}")
    params = NetParams(
        tuple(doc["layer_sizes"]),
        [_decode(w) for w in doc["weights"]],
        [_decode(b) for b in doc["biases"]],
        None if doc["log_std"] is None else _decode(doc["log_std"]),
    )
    adam = None
    if "adam" in doc:
        a = doc["adam"]
        adam = AdamState(
            a["step"],
            [_decode(x) for x in a["m_w"]],
            [_decode(x) for x in a["v_w"]],
            [_decode(x) for x in a["m_b"]],
            [_decode(x) for x in a["v_b"]],
            None if a["m_ls"] is None else _decode(a["m_ls"]),
            None if a["v_ls"] is None else _decode(a["v_ls"]),
        )
    return params, adam
