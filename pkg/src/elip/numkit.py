"""Dense rank-<=2 tensor math with hand-written backward passes.

Arrays are plain numpy ndarrays (float32 for training/inference, float64
for gradient-check runs); every op is pure and keeps the input dtype.
Each primitive comes as a forward returning (out, cache) plus a backward
taking (cache, grad_out) and returning exact analytic gradients, verified
against central finite differences by grad_check.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DimensionError, NumericError

Array = np.ndarray

LN_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


@dataclass
class LayerParams:
    """Named tensors of one layer plus same-shaped gradient accumulators."""

    name: str
    tensors: dict[str, Array]
    trainable: bool = False
    grad: dict[str, Array] = field(default_factory=dict)

    def __post_init__(self):
        for key, value in self.tensors.items():
            if key not in self.grad:
                self.grad[key] = np.zeros_like(value)

    def zero_grad(self) -> None:
        for g in self.grad.values():
            g[...] = 0.0

    def accumulate(self, grads: dict[str, Array]) -> None:
        for key, value in grads.items():
            self.grad[key] += value


# ---------------------------------------------------------------------------
# linear
# ---------------------------------------------------------------------------


def linear(params: LayerParams, x: Array) -> tuple[Array, tuple]:
    """out = x @ W.T + b with W (out_dim, in_dim), x (T, in_dim)."""
    w = params.tensors["weight"]
    b = params.tensors.get("bias")
    if x.shape[1] != w.shape[1]:
        raise DimensionError(
            f"linear '{params.name}': input shape {x.shape} does not match "
            f"weight shape {w.shape}"
        )
    out = x @ w.T
    if b is not None:
        out = out + b
    return out, (x, w)


def linear_backward(cache: tuple, grad_out: Array) -> tuple[Array, dict[str, Array]]:
    x, w = cache
    grad_x = grad_out @ w
    grads = {"weight": grad_out.T @ x}
    grads["bias"] = grad_out.sum(axis=0)
    return grad_x, grads


# ---------------------------------------------------------------------------
# gelu (tanh approximation; the closed form keeps the derivative exact)
# ---------------------------------------------------------------------------


def gelu(x: Array) -> tuple[Array, tuple]:
    """0.5 * x * (1 + tanh(sqrt(2/pi) * (x + 0.044715 x^3))), elementwise."""
    inner = _GELU_C * (x + _GELU_A * x * x * x)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)
    return out, (x, t)


def gelu_backward(cache: tuple, grad_out: Array) -> Array:
    x, t = cache
    dinner = _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)
    local = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
    return grad_out * local


# ---------------------------------------------------------------------------
# layer norm (per-row, epsilon inside the sqrt)
# ---------------------------------------------------------------------------


def _layer_norm_core(gamma: Array, beta: Array, x: Array) -> tuple[Array, tuple]:
    n = x.shape[1]
    mu = np.add.reduce(x, axis=1, keepdims=True) / n
    xc = x - mu
    var = np.add.reduce(xc * xc, axis=1, keepdims=True) / n
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * inv
    out = gamma * xhat + beta
    return out, (xhat, inv, gamma)


def layer_norm(params: LayerParams, x: Array) -> tuple[Array, tuple]:
    """Per-row normalization then affine; gamma/beta of length x.cols."""
    return _layer_norm_core(params.tensors["gamma"], params.tensors["beta"], x)


def layer_norm_backward(cache: tuple, grad_out: Array) -> tuple[Array, dict[str, Array]]:
    xhat, inv, gamma = cache
    n = xhat.shape[1]
    grads = {
        "gamma": np.add.reduce(grad_out * xhat, axis=0),
        "beta": np.add.reduce(grad_out, axis=0),
    }
    dxhat = grad_out * gamma
    grad_x = inv * (
        dxhat
        - np.add.reduce(dxhat, axis=1, keepdims=True) / n
        - xhat * (np.add.reduce(dxhat * xhat, axis=1, keepdims=True) / n)
    )
    return grad_x, grads


# ---------------------------------------------------------------------------
# softmax over rows (max-subtracted)
# ---------------------------------------------------------------------------


def softmax_rows(x: Array) -> tuple[Array, Array]:
    shifted = x - np.maximum.reduce(x, axis=1, keepdims=True)
    e = np.exp(shifted)
    p = e / np.add.reduce(e, axis=1, keepdims=True)
    return p, p


def softmax_rows_backward(cache: Array, grad_out: Array) -> Array:
    p = cache
    return p * (grad_out - np.add.reduce(grad_out * p, axis=1, keepdims=True))


# ---------------------------------------------------------------------------
# pre-norm transformer block: y = x + MHA(LN(x)); z = y + MLP(LN(y))
# ---------------------------------------------------------------------------

def attention_block(params: LayerParams, seq: Array, heads: int) -> tuple[Array, Array, tuple]:
    """Multi-head self-attention block; returns (out, attn (H,T,T), cache).

    Pre-norm residual wiring, MLP hidden width 4*d. attn rows are the
    post-softmax weights per head.
    """
    t_count, d = seq.shape
    if d % heads != 0:
        raise ConfigError(f"model width {d} not divisible by {heads} heads")
    dh = d // heads
    scale = 1.0 / math.sqrt(dh)
    p = params.tensors

    h1, ln1_cache = _layer_norm_core(p["ln1.gamma"], p["ln1.beta"], seq)
    q = h1 @ p["wq"].T + p["bq"]
    k = h1 @ p["wk"].T + p["bk"]
    v = h1 @ p["wv"].T + p["bv"]

    attn = np.empty((heads, t_count, t_count), dtype=seq.dtype)
    o = np.empty_like(q)
    for h in range(heads):
        sl = slice(h * dh, (h + 1) * dh)
        scores = (q[:, sl] @ k[:, sl].T) * scale
        a, _ = softmax_rows(scores)
        attn[h] = a
        o[:, sl] = a @ v[:, sl]

    attn_out = o @ p["wo"].T + p["bo"]
    y = seq + attn_out

    h2, ln2_cache = _layer_norm_core(p["ln2.gamma"], p["ln2.beta"], y)
    m1 = h2 @ p["w1"].T + p["b1"]
    a1, gelu_cache = gelu(m1)
    m2 = a1 @ p["w2"].T + p["b2"]
    out = y + m2

    cache = (h1, ln1_cache, q, k, v, attn, o, h2, ln2_cache, gelu_cache, a1, heads, scale)
    return out, attn, cache


def attention_block_backward(
    params: LayerParams, cache: tuple, grad_out: Array
) -> tuple[Array, dict[str, Array]]:
    h1, ln1_cache, q, k, v, attn, o, h2, ln2_cache, gelu_cache, a1, heads, scale = cache
    d = q.shape[1]
    dh = d // heads
    w1 = params.tensors["w1"]
    w2 = params.tensors["w2"]
    wo = params.tensors["wo"]

    grads: dict[str, Array] = {}

    # MLP branch: out = y + m2
    grad_m2 = grad_out
    grads["w2"] = grad_m2.T @ a1
    grads["b2"] = grad_m2.sum(axis=0)
    grad_a1 = grad_m2 @ w2
    grad_m1 = gelu_backward(gelu_cache, grad_a1)
    grads["w1"] = grad_m1.T @ h2
    grads["b1"] = grad_m1.sum(axis=0)
    grad_h2 = grad_m1 @ w1
    grad_ln2, ln2_grads = layer_norm_backward(ln2_cache, grad_h2)
    grads["ln2.gamma"] = ln2_grads["gamma"]
    grads["ln2.beta"] = ln2_grads["beta"]
    grad_y = grad_out + grad_ln2

    # attention branch: y = seq + O @ wo.T + bo
    grad_attn_out = grad_y
    grads["wo"] = grad_attn_out.T @ o
    grads["bo"] = grad_attn_out.sum(axis=0)
    grad_o = grad_attn_out @ wo

    grad_q = np.zeros_like(q)
    grad_k = np.zeros_like(k)
    grad_v = np.zeros_like(v)
    for h in range(heads):
        sl = slice(h * dh, (h + 1) * dh)
        a = attn[h]
        grad_oh = grad_o[:, sl]
        grad_a = grad_oh @ v[:, sl].T
        grad_v[:, sl] = a.T @ grad_oh
        grad_s = softmax_rows_backward(a, grad_a)
        grad_q[:, sl] = (grad_s @ k[:, sl]) * scale
        grad_k[:, sl] = (grad_s.T @ q[:, sl]) * scale

    grads["wq"] = grad_q.T @ h1
    grads["bq"] = grad_q.sum(axis=0)
    grads["wk"] = grad_k.T @ h1
    grads["bk"] = grad_k.sum(axis=0)
    grads["wv"] = grad_v.T @ h1
    grads["bv"] = grad_v.sum(axis=0)

    grad_h1 = (
        grad_q @ params.tensors["wq"]
        + grad_k @ params.tensors["wk"]
        + grad_v @ params.tensors["wv"]
    )
    grad_ln1, ln1_grads = layer_norm_backward(ln1_cache, grad_h1)
    grads["ln1.gamma"] = ln1_grads["gamma"]
    grads["ln1.beta"] = ln1_grads["beta"]
    grad_seq = grad_y + grad_ln1
    return grad_seq, grads


# ---------------------------------------------------------------------------
# finite-difference checker
# ---------------------------------------------------------------------------


def grad_check(f, point: dict[str, Array], h: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    f(point) must return (scalar loss, grads dict keyed like point); point
    arrays should be float64. Error metric per element:
    |analytic - numeric| / max(1, |numeric|).
    """
    loss, analytic = f(point)
    if not np.isfinite(loss):
        raise NumericError(f"grad_check: non-finite loss {loss!r}")
    worst = 0.0
    for name, base in point.items():
        a = np.asarray(analytic[name], dtype=np.float64)
        flat = base.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + h
            lp = f(point)[0]
            flat[idx] = orig - h
            lm = f(point)[0]
            flat[idx] = orig
            if not (np.isfinite(lp) and np.isfinite(lm)):
                raise NumericError(f"grad_check: non-finite loss near {name}[{idx}]")
            numeric = (lp - lm) / (2.0 * h)
            err = abs(a.reshape(-1)[idx] - numeric) / max(1.0, abs(numeric))
            if err > worst:
                worst = err
    return worst
