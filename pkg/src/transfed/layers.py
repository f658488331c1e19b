"""Dense-tensor layer math with explicit forward/backward pairs.

Everything runs in float64 on row-major numpy arrays. Each ``*_forward``
returns ``(output, cache)``; the matching ``*_backward`` consumes that cache
plus the upstream gradient and returns exact reverse-mode gradients for the
layer input and every parameter. Inputs may be 2-D ``(tokens, features)`` or
carry extra leading batch axes; reductions for parameter gradients collapse
all leading axes.

All functions are pure and deterministic: same inputs give bit-identical
outputs.
"""

from __future__ import annotations

import math
from typing import NamedTuple

import numpy as np

PROB_FLOOR = 1e-12

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


def _as_f64(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def matmul(a, b) -> np.ndarray:
    """Matrix product with an explicit shape check.

    Accumulation order is numpy's fixed contraction order, so repeated calls
    on the same operands are bit-reproducible.
    """
    a = _as_f64(a)
    b = _as_f64(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"cannot multiply shapes {a.shape} and {b.shape}")
    return a @ b


def softmax_rows(x) -> np.ndarray:
    """Row-wise softmax with max-subtraction for overflow safety.

    Each output row is non-negative and sums to 1 (to within float64
    round-off, well under 1e-12).
    """
    x = _as_f64(x)
    out = x - x.max(axis=-1, keepdims=True)
    np.exp(out, out=out)
    out /= out.sum(axis=-1, keepdims=True)
    return out


def gelu(x: np.ndarray) -> np.ndarray:
    """Gaussian error linear unit, tanh form."""
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + _GELU_A * x**3)))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    """Exact derivative of the tanh-form gelu above."""
    u = _GELU_C * (x + _GELU_A * x**3)
    t = np.tanh(u)
    du = _GELU_C * (1.0 + 3.0 * _GELU_A * x**2)
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du


ACTIVATIONS = ("identity", "gelu", "softmax")


class DenseCache(NamedTuple):
    x: np.ndarray
    z: np.ndarray
    y: np.ndarray
    kernel: np.ndarray
    activation: str


def dense_forward(x, kernel, bias, activation: str = "identity"):
    """``activation(x @ kernel + bias)`` with a cache for the backward pass.

    softmax is applied row-wise; identity and gelu element-wise.
    """
    x = _as_f64(x)
    kernel = _as_f64(kernel)
    bias = _as_f64(bias)
    if activation not in ACTIVATIONS:
        raise ValueError(f"unknown activation {activation!r}")
    if x.shape[-1] != kernel.shape[0] or bias.shape != (kernel.shape[1],):
        raise ShapeError(
            f"dense shapes disagree: x {x.shape}, kernel {kernel.shape}, "
            f"bias {bias.shape}"
        )
    z = x @ kernel + bias
    if activation == "identity":
        y = z
    elif activation == "gelu":
        y = gelu(z)
    else:
        y = softmax_rows(z)
    return y, DenseCache(x, z, y, kernel, activation)


def dense(x, kernel, bias, activation: str = "identity") -> np.ndarray:
    """Forward-only dense layer."""
    y, _ = dense_forward(x, kernel, bias, activation)
    return y


def dense_backward(cache: DenseCache, dy):
    """Gradients of a dense layer: returns ``(dx, dkernel, dbias)``.

    The softmax branch applies the full per-row Jacobian
    ``dz = y * (dy - sum(dy * y))``.
    """
    dy = _as_f64(dy)
    x, z, y, kernel, activation = cache
    if activation == "identity":
        dz = dy
    elif activation == "gelu":
        dz = dy * gelu_grad(z)
    else:
        dz = y * (dy - (dy * y).sum(axis=-1, keepdims=True))
    return dense_backward_from_preact(cache, dz)


def dense_backward_from_preact(cache: DenseCache, dz):
    """Dense backward given the gradient at the pre-activation ``z``.

    Used directly by the fused softmax + cross-entropy head, where
    ``dz = (probs - one_hot) / m`` is cheaper and better conditioned than
    chaining the softmax Jacobian.
    """
    x, _, _, kernel, _ = cache
    xf = x.reshape(-1, x.shape[-1])
    dzf = dz.reshape(-1, dz.shape[-1])
    dkernel = xf.T @ dzf
    dbias = dzf.sum(axis=0)
    dx = dz @ kernel.T
    return dx, dkernel, dbias


class NormCache(NamedTuple):
    xhat: np.ndarray
    sigma: np.ndarray
    gain: np.ndarray


def layer_norm_forward(x, gain, bias, eps: float = 1e-6):
    """Per-row standardization followed by a learnable affine map.

    Each row is shifted to zero mean and scaled to unit variance
    (population variance, eps inside the square root), then multiplied by
    ``gain`` and shifted by ``bias``.
    """
    x = _as_f64(x)
    gain = _as_f64(gain)
    bias = _as_f64(bias)
    if eps <= 0:
        raise ValueError("eps must be positive")
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    sigma = np.sqrt(var + eps)
    xhat = (x - mu) / sigma
    y = xhat * gain + bias
    return y, NormCache(xhat, sigma, gain)


def layer_norm(x, gain, bias, eps: float = 1e-6) -> np.ndarray:
    """Forward-only layer normalization."""
    y, _ = layer_norm_forward(x, gain, bias, eps)
    return y


def layer_norm_backward(cache: NormCache, dy):
    """Gradients of layer_norm: returns ``(dx, dgain, dbias)``.

    With ``g = dy * gain``:
        dx = (g - mean(g) - xhat * mean(g * xhat)) / sigma
    """
    dy = _as_f64(dy)
    xhat, sigma, gain = cache
    g = dy * gain
    m1 = g.mean(axis=-1, keepdims=True)
    m2 = (g * xhat).mean(axis=-1, keepdims=True)
    dx = (g - m1 - xhat * m2) / sigma
    lead = tuple(range(dy.ndim - 1))
    dgain = (dy * xhat).sum(axis=lead)
    dbias = dy.sum(axis=lead)
    return dx, dgain, dbias


class AttentionCache(NamedTuple):
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    weights: np.ndarray
    scale: float


def scaled_dot_attention_forward(q, k, v, scale: float | None = None):
    """Scaled dot-product attention.

        weights = softmax_rows(q @ k.T * scale),  output = weights @ v

    ``scale`` defaults to ``1/sqrt(d_k)``; pass ``1.0`` for the raw
    dot-product variant. Returns ``(output, weights, cache)``. Every weights
    row sums to 1, so each output row is a convex combination of v rows.
    """
    q = _as_f64(q)
    k = _as_f64(k)
    v = _as_f64(v)
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"q/k key dims differ: {q.shape} vs {k.shape}")
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"k/v sequence lengths differ: {k.shape} vs {v.shape}")
    if scale is None:
        scale = 1.0 / math.sqrt(q.shape[-1])
    # folding the scale into q avoids a full pass over the (t, t) scores;
    # the scores buffer is owned here, so the softmax can run in place
    w = (q * scale) @ k.swapaxes(-1, -2)
    w -= w.max(axis=-1, keepdims=True)
    np.exp(w, out=w)
    w /= w.sum(axis=-1, keepdims=True)
    out = w @ v
    return out, w, AttentionCache(q, k, v, w, scale)


def scaled_dot_attention(q, k, v, scale: float | None = None):
    """Forward-only attention; returns ``(output, weights)``."""
    out, w, _ = scaled_dot_attention_forward(q, k, v, scale)
    return out, w


def scaled_dot_attention_backward(cache: AttentionCache, dout):
    """Gradients of attention: returns ``(dq, dk, dv)``."""
    dout = _as_f64(dout)
    q, k, v, w, scale = cache
    dv = w.swapaxes(-1, -2) @ dout
    ds = dout @ v.swapaxes(-1, -2)
    ds -= np.einsum("...ij,...ij->...i", ds, w)[..., None]
    ds *= w
    dq = (ds @ k) * scale
    dk = (ds.swapaxes(-1, -2) @ q) * scale
    return dq, dk, dv


MHA_PARAM_NAMES = ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")


class MhaCache(NamedTuple):
    q_cache: DenseCache
    k_cache: DenseCache
    v_cache: DenseCache
    attn_cache: AttentionCache
    out_cache: DenseCache
    heads: int


def split_heads(x: np.ndarray, heads: int) -> np.ndarray:
    """(..., t, d) -> (..., heads, t, d/heads)."""
    *lead, t, d = x.shape
    return x.reshape(*lead, t, heads, d // heads).swapaxes(-2, -3)


def merge_heads(x: np.ndarray) -> np.ndarray:
    """(..., heads, t, dh) -> (..., t, heads*dh)."""
    x = np.ascontiguousarray(x.swapaxes(-2, -3))
    *lead, t, h, dh = x.shape
    return x.reshape(*lead, t, h * dh)


def multi_head_attention_forward(x, params: dict, heads: int):
    """Projected multi-head self-attention over the token axis.

    ``params`` maps the names in MHA_PARAM_NAMES to arrays: wq/wk/wv/wo are
    (d_model, d_model) kernels holding all heads side by side, bq/bk/bv/bo
    are (d_model,) biases. The single-head, identity-projection case reduces
    to plain scaled_dot_attention of x with itself.
    """
    x = _as_f64(x)
    d = x.shape[-1]
    if heads < 1 or d % heads != 0:
        raise ShapeError(f"d_model {d} not divisible by heads {heads}")
    q, qc = dense_forward(x, params["wq"], params["bq"])
    k, kc = dense_forward(x, params["wk"], params["bk"])
    v, vc = dense_forward(x, params["wv"], params["bv"])
    ah, _, ac = scaled_dot_attention_forward(
        split_heads(q, heads), split_heads(k, heads), split_heads(v, heads)
    )
    y, oc = dense_forward(merge_heads(ah), params["wo"], params["bo"])
    return y, MhaCache(qc, kc, vc, ac, oc, heads)


def multi_head_attention(x, params: dict, heads: int) -> np.ndarray:
    """Forward-only multi-head attention."""
    y, _ = multi_head_attention_forward(x, params, heads)
    return y


def multi_head_attention_backward(cache: MhaCache, dy):
    """Gradients of MHA: returns ``(dx, grads)`` with grads keyed like params."""
    dy = _as_f64(dy)
    dmerged, dwo, dbo = dense_backward(cache.out_cache, dy)
    dqh, dkh, dvh = scaled_dot_attention_backward(
        cache.attn_cache, split_heads(dmerged, cache.heads)
    )
    dxq, dwq, dbq = dense_backward(cache.q_cache, merge_heads(dqh))
    dxk, dwk, dbk = dense_backward(cache.k_cache, merge_heads(dkh))
    dxv, dwv, dbv = dense_backward(cache.v_cache, merge_heads(dvh))
    grads = {
        "wq": dwq, "bq": dbq,
        "wk": dwk, "bk": dbk,
        "wv": dwv, "bv": dbv,
        "wo": dwo, "bo": dbo,
    }
    return dxq + dxk + dxv, grads


def cross_entropy(probs, labels) -> float:
    """Mean categorical cross-entropy over rows of a probability matrix.

    Probabilities are clamped below at PROB_FLOOR so the loss stays finite
    even for a confidently wrong prediction.
    """
    probs = _as_f64(probs)
    labels = np.asarray(labels, dtype=np.int64)
    if probs.ndim != 2 or labels.shape != (probs.shape[0],):
        raise ShapeError(
            f"cross_entropy expects (m, c) probs and m labels, got "
            f"{probs.shape} and {labels.shape}"
        )
    if labels.size and (labels.min() < 0 or labels.max() >= probs.shape[1]):
        raise ValueError(f"label out of range [0, {probs.shape[1]})")
    picked = probs[np.arange(probs.shape[0]), labels]
    return float(-np.log(np.maximum(picked, PROB_FLOOR)).mean())


def softmax_cross_entropy_grad(probs, labels) -> np.ndarray:
    """Fused gradient of mean cross-entropy through a softmax, at the logits.

    Equals ``(probs - one_hot(labels)) / m``. Exact whenever no probability
    was clamped by the cross_entropy floor.
    """
    probs = _as_f64(probs)
    labels = np.asarray(labels, dtype=np.int64)
    m = probs.shape[0]
    g = probs.copy()
    g[np.arange(m), labels] -= 1.0
    return g / m


def sinusoidal_encoding(tokens: int, dim: int) -> np.ndarray:
    """Fixed sinusoidal position table of shape (tokens, dim)."""
    pos = np.arange(tokens, dtype=np.float64)[:, None]
    i = np.arange(dim, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, 2.0 * np.floor(i / 2.0) / dim)
    pe = np.zeros((tokens, dim))
    pe[:, 0::2] = np.sin(angle[:, 0::2])
    pe[:, 1::2] = np.cos(angle[:, 1::2])
    return pe
