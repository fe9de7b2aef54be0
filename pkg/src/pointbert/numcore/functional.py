"""Composite differentiable functions with hand-written backward rules."""

import numpy as np

from ..errors import LabelError, ShapeError
from .tensor import Tensor, _normalize_axis, as_tensor, is_grad_enabled


def softmax(x, axis=-1):
    x = as_tensor(x)
    axis = _normalize_axis(axis, x.ndim)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor.from_op(out, (x,), backward)


def log_softmax(x, axis=-1):
    x = as_tensor(x)
    axis = _normalize_axis(axis, x.ndim)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return Tensor.from_op(out, (x,), backward)


def layernorm(x, gain, bias, eps=1e-5):
    """Normalize over the last axis, then apply ``gain * xhat + bias``."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"gain/bias must have shape ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        gx = ggain = gbias = None
        lead = tuple(range(x.ndim - 1))
        if gain.requires_grad:
            ggain = (g * xhat).sum(axis=lead)
        if bias.requires_grad:
            gbias = g.sum(axis=lead)
        if x.requires_grad:
            gh = g * gain.data
            gx = inv * (
                gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True)
            )
        return gx, ggain, gbias

    return Tensor.from_op(out, (x, gain, bias), backward)


def cross_entropy_logits(logits, targets, weights=None):
    """Mean of ``-log softmax(logits)[target]`` over rows.

    ``weights`` (one per row) turns the mean into a weighted mean.
    """
    logits = as_tensor(logits)
    if logits.ndim != 2:
        raise ShapeError(f"logits must be 2-d, got {logits.shape}")
    targets = np.asarray(targets)
    rows, classes = logits.shape
    if targets.shape != (rows,):
        raise ShapeError(f"expected {rows} targets, got shape {targets.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= classes):
        raise LabelError(f"targets must lie in [0, {classes})")
    targets = targets.astype(np.int64)
    if weights is None:
        w = np.full(rows, 1.0 / rows)
    else:
        w = np.asarray(weights, dtype=np.float64)
        w = w / w.sum()
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logz
    picked = logp[np.arange(rows), targets]
    out = -(w * picked).sum()

    def backward(g):
        p = np.exp(logp)
        p[np.arange(rows), targets] -= 1.0
        return (g * w[:, None] * p,)

    return Tensor.from_op(out, (logits,), backward)


def dropout(x, rate, rng, training):
    x = as_tensor(x)
    if not training or rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return Tensor.from_op(x.data * keep, (x,), lambda g: (g * keep,))


def l2_normalize(x, axis=-1, eps=1e-12):
    x = as_tensor(x)
    axis = _normalize_axis(axis, x.ndim)
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True) + eps)
    out = x.data / norm

    def backward(g):
        return ((g - out * (g * out).sum(axis=axis, keepdims=True)) / norm,)

    return Tensor.from_op(out, (x,), backward)


def gather_rows(x, index):
    """``x[b, index[b, ...]]`` along axis 1 for a batched ``x`` of shape (B, M, C)."""
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.int64)
    b = np.arange(x.shape[0]).reshape((-1,) + (1,) * (index.ndim - 1))
    out = x.data[b, index]

    def backward(g):
        grad = np.zeros(x.shape)
        np.add.at(grad, (b, index), g)
        return (grad,)

    return Tensor.from_op(out, (x,), backward)


__all__ = [
    "softmax",
    "log_softmax",
    "layernorm",
    "cross_entropy_logits",
    "dropout",
    "l2_normalize",
    "gather_rows",
    "is_grad_enabled",
]
