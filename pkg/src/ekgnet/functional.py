"""Differentiable layer primitives built on :mod:`ekgnet.tensor`."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from . import kernels
from .errors import EmptyInputError, NumericDomainError, ParameterError, ShapeError
from .tensor import Tensor, make_result

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``0.5 * x * (1 + erf(x / sqrt(2)))``."""
    xd = x.data
    if not np.isfinite(xd).all():
        raise NumericDomainError("gelu received non-finite input")
    cdf = 0.5 * (1.0 + erf(xd * _INV_SQRT2))
    out = (xd * cdf).astype(xd.dtype, copy=False)

    def bw(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * xd * xd)
        return ((g * (cdf + xd * pdf)).astype(g.dtype, copy=False),)

    return make_result(out, (x,), bw, "gelu")


@dataclass
class BatchNormState:
    """Running statistics for one batch-norm layer."""

    num_features: int
    momentum: float = 0.1
    eps: float = 1e-5
    dtype: type = np.float32
    running_mean: np.ndarray = field(init=False)
    running_var: np.ndarray = field(init=False)

    def __post_init__(self):
        self.running_mean = np.zeros(self.num_features, dtype=self.dtype)
        self.running_var = np.ones(self.num_features, dtype=self.dtype)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState, training: bool) -> Tensor:
    """Per-channel normalization over every non-channel axis (channel axis 1)."""
    if x.ndim < 2:
        raise ShapeError(f"batch_norm needs a channel axis, got shape {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,) or state.num_features != c:
        raise ShapeError(f"batch_norm: input has {c} channels, parameters have {gamma.shape[0]}")
    if x.size == 0:
        raise EmptyInputError("batch_norm received an empty batch")
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, c) + (1,) * (x.ndim - 2)
    xd = x.data
    gd = gamma.data.reshape(bshape)
    n = xd.size // c
    if training:
        mu = xd.mean(axis=axes, keepdims=True)
        xc = xd - mu
        var = (xc * xc).mean(axis=axes, keepdims=True)
        m = state.momentum
        unbiased = var.reshape(c) * (n / (n - 1)) if n > 1 else var.reshape(c)
        state.running_mean[...] = (1 - m) * state.running_mean + m * mu.reshape(c)
        state.running_var[...] = (1 - m) * state.running_var + m * unbiased
    else:
        mu = state.running_mean.reshape(bshape).astype(xd.dtype)
        var = state.running_var.reshape(bshape).astype(xd.dtype)
        xc = xd - mu
    invstd = (1.0 / np.sqrt(var + state.eps)).astype(xd.dtype)
    xhat = xc * invstd
    out = xhat * gd + beta.data.reshape(bshape)

    def bw(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        dxhat = g * gd
        if training:
            dx = invstd / n * (n * dxhat - dxhat.sum(axis=axes, keepdims=True)
                               - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True))
        else:
            dx = dxhat * invstd
        return dx.astype(xd.dtype, copy=False), dgamma, dbeta

    return make_result(out.astype(xd.dtype, copy=False), (x, gamma, beta), bw, "batch_norm")


def softmax_with_temperature(logits: Tensor, tau: float, axis: int = -1) -> Tensor:
    """``softmax(logits / tau)`` along ``axis`` with max subtraction."""
    if not tau > 0:
        raise ParameterError(f"temperature must be positive, got {tau}")
    z = logits.data / tau
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = (e / e.sum(axis=axis, keepdims=True)).astype(logits.dtype, copy=False)

    def bw(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return ((y * (g - dot) / tau).astype(g.dtype, copy=False),)

    return make_result(y, (logits,), bw, "softmax")


def log_softmax(logits: Tensor, axis: int = -1) -> Tensor:
    z = logits.data
    m = z.max(axis=axis, keepdims=True)
    lse = m + np.log(np.exp(z - m).sum(axis=axis, keepdims=True))
    out = z - lse
    soft = np.exp(out)

    def bw(g):
        return (g - soft * g.sum(axis=axis, keepdims=True),)

    return make_result(out, (logits,), bw, "log_softmax")


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under ``softmax(logits)``."""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy expects B×C logits and B targets, got {logits.shape}, {targets.shape}")
    bsz, ncls = logits.shape
    if bsz == 0:
        raise EmptyInputError("cross_entropy received an empty batch")
    if targets.min() < 0 or targets.max() >= ncls:
        raise IndexError(f"target index out of range [0, {ncls})")
    z = logits.data
    m = z.max(axis=1, keepdims=True)
    shifted = z - m
    sumexp = np.exp(shifted).sum(axis=1, keepdims=True)
    rows = np.arange(bsz)
    nll = np.log(sumexp[:, 0]) - shifted[rows, targets]
    loss = np.asarray(nll.mean(), dtype=z.dtype)

    def bw(g):
        p = np.exp(shifted) / sumexp
        p[rows, targets] -= 1.0
        return ((p * (g / bsz)).astype(z.dtype, copy=False),)

    return make_result(loss, (logits,), bw, "cross_entropy")


def adaptive_avg_pool3d_to_unit(x: Tensor) -> Tensor:
    """Mean over the last three axes of a ``B×C×D×H×W`` tensor, kept as ``1×1×1``."""
    if x.ndim != 5:
        raise ShapeError(f"expected B×C×D×H×W input, got shape {x.shape}")
    src = x.shape
    n = src[2] * src[3] * src[4]
    out = x.data.mean(axis=(2, 3, 4), keepdims=True)

    def bw(g):
        return (np.broadcast_to(g / n, src).astype(g.dtype, copy=True),)

    return make_result(out, (x,), bw, "global_avg_pool")


def avg_pool3d(x: Tensor, factor: int) -> Tensor:
    """Non-overlapping ``factor``-cube average pooling on D, H and W.

    Trailing partial windows average only their valid elements, so the output
    extent is ``ceil(n / factor)`` per axis.
    """
    if factor < 1:
        raise ParameterError(f"pooling factor must be >= 1, got {factor}")
    if x.ndim != 5:
        raise ShapeError(f"expected B×C×D×H×W input, got shape {x.shape}")
    if factor == 1:
        return x
    in_size = x.shape[2:]
    out = kernels.avg_pool3d_forward(x.data, factor)

    def bw(g):
        return (kernels.avg_pool3d_backward(np.ascontiguousarray(g), in_size, factor),)

    return make_result(out, (x,), bw, "avg_pool3d")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w.T + b`` for ``x`` of shape B×in and ``w`` of shape out×in."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {w.shape}")
    xd, wd = x.data, w.data
    out = xd @ wd.T
    if b is not None:
        out = out + b.data
    inputs = (x, w) if b is None else (x, w, b)

    def bw(g):
        grads = (g @ wd, g.T @ xd)
        return grads if b is None else grads + (g.sum(axis=0),)

    return make_result(out, inputs, bw, "linear")
