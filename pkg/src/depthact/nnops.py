"""Shared building blocks: parameter init and multi-head attention."""

from __future__ import annotations

import numpy as np

from . import tensor as tt
from .errors import ShapeError
from .tensor import Tensor


def param(rng: np.random.Generator, shape, std: float = 0.02, requires_grad: bool = True) -> Tensor:
    return Tensor(rng.normal(0.0, std, size=shape), requires_grad=requires_grad)


def zeros_param(shape, requires_grad: bool = True) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def ones_param(shape, requires_grad: bool = True) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=requires_grad)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = tt.matmul(x, w)
    return y if b is None else tt.add(y, b)


def split_heads(x: Tensor, heads: int) -> Tensor:
    """(..., n, d) -> (..., heads, n, d // heads)"""
    *lead, n, d = x.shape
    if d % heads:
        raise ShapeError(f"dim {d} not divisible by {heads} heads")
    x = tt.reshape(x, (*lead, n, heads, d // heads))
    ndim = len(x.shape)
    axes = list(range(ndim - 3)) + [ndim - 2, ndim - 3, ndim - 1]
    return tt.transpose(x, axes)


def merge_heads(x: Tensor) -> Tensor:
    """(..., heads, n, dh) -> (..., n, heads * dh)"""
    ndim = len(x.shape)
    axes = list(range(ndim - 3)) + [ndim - 2, ndim - 3, ndim - 1]
    x = tt.transpose(x, axes)
    *lead, n, h, dh = x.shape
    return tt.reshape(x, (*lead, n, h * dh))


def attention(q: Tensor, k: Tensor, v: Tensor, heads: int) -> Tensor:
    """Scaled dot-product attention over the second-to-last axis.

    q: (..., n_q, d), k/v: (..., n_k, d). Any number of leading axes.
    """
    d = q.shape[-1]
    qh, kh, vh = split_heads(q, heads), split_heads(k, heads), split_heads(v, heads)
    ndim = len(kh.shape)
    scores = tt.matmul(qh, tt.transpose(kh, list(range(ndim - 2)) + [ndim - 1, ndim - 2]))
    scores = tt.mul(scores, 1.0 / np.sqrt(d / heads))
    weights = tt.softmax(scores)
    return merge_heads(tt.matmul(weights, vh))


def mha_block(x: Tensor, ctx: Tensor, p: dict, heads: int) -> Tensor:
    """Pre-norm multi-head attention, no residual: MHA(LN(x); LN(ctx))."""
    xn = tt.layer_norm(x, p["ln_q_g"], p["ln_q_b"])
    cn = xn if ctx is x else tt.layer_norm(ctx, p["ln_c_g"], p["ln_c_b"])
    q = linear(xn, p["wq"])
    k = linear(cn, p["wk"])
    v = linear(cn, p["wv"])
    return linear(attention(q, k, v, heads), p["wo"])
