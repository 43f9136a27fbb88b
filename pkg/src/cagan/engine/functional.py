"""Differentiable layer primitives (NHWC layout)."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .tensor import (DimensionError, ParameterError, StateError, Tensor,
                     concat, ensure_tensor, reshape)

KERNEL = 4
STRIDE = 2


def conv_output_size(n):
    return math.ceil(n / STRIDE)


def _same_pad(n):
    out = conv_output_size(n)
    total = max((out - 1) * STRIDE + KERNEL - n, 0)
    return out, total // 2, total - total // 2


def conv2d(x, filters, bias):
    """4x4 stride-2 convolution; output spatial size is ceil(in/2).

    Even sizes get one pixel of zero padding on each side. Odd sizes get the
    extra pixel on the bottom/right so that the output still equals ceil(in/2).
    """
    if x.data.ndim != 4:
        raise DimensionError(f"conv2d expects N x H x W x C input, got shape {x.shape}")
    if filters.shape[:2] != (KERNEL, KERNEL):
        raise DimensionError(f"filters must be 4x4 x C x F, got {filters.shape}")
    n, h, w, c = x.shape
    if filters.shape[2] != c:
        raise DimensionError(f"input has {c} channels but filters expect {filters.shape[2]}")
    f = filters.shape[3]
    if bias.shape != (f,):
        raise DimensionError(f"bias shape {bias.shape} does not match {f} filters")

    ho, pt, _ = _same_pad(h)
    wo, pl, _ = _same_pad(w)
    # padded extent is always 2*out + 2, which keeps the backward reshape exact
    hp, wp = 2 * ho + 2, 2 * wo + 2
    xp = np.zeros((n, hp, wp, c), dtype=x.dtype)
    xp[:, pt:pt + h, pl:pl + w, :] = x.data
    s0, s1, s2, s3 = xp.strides
    windows = as_strided(xp, (n, ho, wo, KERNEL, KERNEL, c), (s0, 2 * s1, 2 * s2, s1, s2, s3),
                         writeable=False)
    cols = windows.reshape(n * ho * wo, KERNEL * KERNEL * c)
    wmat = filters.data.reshape(KERNEL * KERNEL * c, f)
    out = (cols @ wmat + bias.data).reshape(n, ho, wo, f)

    def backward(g):
        g2 = g.reshape(-1, f)
        dw = (cols.T @ g2).reshape(filters.shape)
        db = g2.sum(axis=0)
        dx = None
        if x.requires_grad:
            # kernel offset i = 2a + r lands on padded row 2(p + a) + r
            dcols = (g2 @ wmat.T).reshape(n, ho, wo, 2, 2, 2, 2, c)
            dxp = np.zeros((n, ho + 1, 2, wo + 1, 2, c), dtype=dcols.dtype)
            for a in range(2):
                for b in range(2):
                    dxp[:, a:a + ho, :, b:b + wo, :, :] += dcols[:, :, :, a, :, b, :, :].transpose(0, 1, 3, 2, 4, 5)
            dx = dxp.reshape(n, hp, wp, c)[:, pt:pt + h, pl:pl + w, :]
        return dx, dw, db

    return Tensor(out, _parents=(x, filters, bias), _backward=backward)


class BatchNormState:
    """Running statistics for one batch-norm layer."""

    def __init__(self, channels, momentum=0.9, eps=1e-5, dtype=np.float32):
        self.momentum = momentum
        self.eps = eps
        self.mean = np.zeros(channels, dtype=dtype)
        self.var = np.ones(channels, dtype=dtype)
        self.count = 0

    def update(self, mean, var_unbiased):
        m = self.momentum
        if self.count == 0:
            self.mean = mean.astype(self.mean.dtype)
            self.var = var_unbiased.astype(self.var.dtype)
        else:
            self.mean = (m * self.mean + (1 - m) * mean).astype(self.mean.dtype)
            self.var = (m * self.var + (1 - m) * var_unbiased).astype(self.var.dtype)
        self.count += 1


def batch_norm(x, gamma, beta, state, mode="train", track=True):
    """Per-channel normalization over every axis except the last.

    ``mode='train'`` normalizes with batch statistics and, when ``track`` is
    set, folds them into ``state``. ``mode='eval'`` uses the running values.
    """
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"gamma/beta must have shape ({c},)")
    eps = state.eps
    axes = tuple(range(x.data.ndim - 1))
    if mode == "eval":
        if state.count == 0:
            raise StateError("batch_norm eval mode before any running statistics were accumulated")
        inv = 1.0 / np.sqrt(state.var + eps)
        scale = (gamma.data * inv).astype(x.dtype, copy=False)
        shift = beta.data - state.mean * scale
        xhat = (x.data - state.mean) * inv
        out = x.data * scale + shift

        def backward(g):
            return g * scale, (g * xhat).sum(axis=axes), g.sum(axis=axes)

        return Tensor(out, _parents=(x, gamma, beta), _backward=backward)
    if mode != "train":
        raise ParameterError(f"unknown batch_norm mode {mode!r}")

    m = x.size // c
    mean = x.data.mean(axis=axes)
    centered = x.data - mean
    var = (centered * centered).mean(axis=axes)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = xhat * gamma.data + beta.data
    if track:
        state.update(mean, var * (m / (m - 1)) if m > 1 else var)

    def backward(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        dx = None
        if x.requires_grad:
            dxhat = g * gamma.data
            dx = (inv / m) * (m * dxhat - dxhat.sum(axis=axes) - xhat * (dxhat * xhat).sum(axis=axes))
        return dx, dgamma, dbeta

    return Tensor(out, _parents=(x, gamma, beta), _backward=backward)


def dense(x, weights, bias):
    if x.data.ndim != 2 or weights.data.ndim != 2 or x.shape[1] != weights.shape[0]:
        raise DimensionError(f"dense: cannot multiply {x.shape} by {weights.shape}")
    if bias.shape != (weights.shape[1],):
        raise DimensionError(f"dense: bias shape {bias.shape} does not match {weights.shape[1]} units")

    def backward(g):
        dx = g @ weights.data.T if x.requires_grad else None
        return dx, x.data.T @ g, g.sum(axis=0)

    return Tensor(x.data @ weights.data + bias.data, _parents=(x, weights, bias), _backward=backward)


def softmax(x):
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return Tensor(out, _parents=(x,), _backward=backward)


@dataclass(frozen=True)
class NoiseSpec:
    """Dropout noise injected into the generator head."""
    rate: float = 0.5
    active_at_inference: bool = False

    def __post_init__(self):
        if not 0.0 <= self.rate < 1.0:
            raise ParameterError(f"noise rate must lie in [0, 1), got {self.rate}")


def dropout(x, rate, rng, training=True):
    """Inverted dropout. Survivors are scaled by 1/(1-rate)."""
    if not 0.0 <= rate < 1.0:
        raise ParameterError(f"dropout rate must lie in [0, 1), got {rate}")
    if rate == 0.0 or not training:
        return x
    keep = (rng.random(x.shape) >= rate)
    scale = keep * np.asarray(1.0 / (1.0 - rate), dtype=x.dtype)
    scale = scale.astype(x.dtype, copy=False)
    return Tensor(x.data * scale, _parents=(x,), _backward=lambda g: (g * scale,))


def flatten(x):
    return reshape(x, (x.shape[0], -1))


__all__ = [
    "BatchNormState", "NoiseSpec", "batch_norm", "concat", "conv2d", "conv_output_size",
    "dense", "dropout", "ensure_tensor", "flatten", "softmax",
]
