"""Differentiable neural-network primitives built on :class:`Tensor`."""

from __future__ import annotations

import math

import numpy as np
from scipy import special

from relayformer.errors import ContractError
from relayformer.numerics.tensor import Tensor, record_macs

LN_EPS = 1e-5
_SQRT_HALF = math.sqrt(0.5)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis, shifted by the row max for stability."""
    if x.ndim == 0 or x.shape[-1] < 1:
        raise ContractError("softmax needs a non-empty last axis")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    record_macs("elementwise", y.size)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return Tensor.from_op(y, (x,), backward, "softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LN_EPS) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ContractError(f"layer_norm affine must have shape ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    record_macs("elementwise", x.size)

    def backward(g):
        gxhat = g * gamma.data
        gx = inv * (
            gxhat
            - gxhat.mean(axis=-1, keepdims=True)
            - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return gx, g * xhat, g

    return Tensor.from_op(xhat * gamma.data + beta.data, (x, gamma, beta), backward, "layer_norm")


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)`` with the Gaussian CDF via erf."""
    v = x.data
    cdf = 0.5 * (1.0 + special.erf(v * _SQRT_HALF))
    record_macs("elementwise", v.size)

    def backward(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * v * v)
        return (g * (cdf + v * pdf),)

    return Tensor.from_op(v * cdf, (x,), backward, "gelu")


def sigmoid(x: Tensor) -> Tensor:
    y = special.expit(x.data)
    record_macs("elementwise", y.size)
    return Tensor.from_op(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` stored as (d_in, d_out)."""
    y = x @ weight
    return y if bias is None else y + bias
