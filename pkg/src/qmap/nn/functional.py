"""Differentiable ops on :class:`~qmap.nn.tensor.Tensor`.

Each function computes the forward value with numpy (convolutions dispatch
through :mod:`qmap.nn.conv_kernels`) and registers a closure that pushes the
incoming gradient to its parents.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import expit

from . import conv_kernels as ck
from .tensor import Tensor, make_node


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def backward(g):
        a.accumulate(_unbroadcast(g, a.data.shape))
        b.accumulate(_unbroadcast(g, b.data.shape))

    return make_node(out, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data

    def backward(g):
        a.accumulate(_unbroadcast(g, a.data.shape))
        b.accumulate(-_unbroadcast(g, b.data.shape))

    return make_node(out, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data

    def backward(g):
        a.accumulate(_unbroadcast(g * b.data, a.data.shape))
        b.accumulate(_unbroadcast(g * a.data, b.data.shape))

    return make_node(out, (a, b), backward)


def mean(x: Tensor) -> Tensor:
    out = np.asarray(x.data.mean())
    size = x.data.size

    def backward(g):
        x.accumulate(np.broadcast_to(g / size, x.data.shape).astype(x.data.dtype, copy=False))

    return make_node(out, (x,), backward)


def mse(pred: Tensor, target: Tensor) -> Tensor:
    diff = sub(pred, target)
    return mean(mul(diff, diff))


def silu(x: Tensor) -> Tensor:
    sig = expit(x.data)
    out = x.data * sig

    def backward(g):
        x.accumulate(g * (sig * (1.0 + x.data * (1.0 - sig))))

    return make_node(out, (x,), backward)


def reshape(x: Tensor, shape: tuple) -> Tensor:
    out = x.data.reshape(shape)

    def backward(g):
        x.accumulate(g.reshape(x.data.shape))

    return make_node(out, (x,), backward)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """``x (B,Din) @ w.T (Din,Dout) + b`` -> (B,Dout)."""
    out = x.data @ w.data.T + b.data

    def backward(g):
        x.accumulate(g @ w.data)
        w.accumulate(g.T @ x.data)
        b.accumulate(g.sum(axis=0))

    return make_node(out, (x, w, b), backward)


def conv2d(x: Tensor, w: Tensor, b: Tensor = None, stride: int = 1, pad: int = 0) -> Tensor:
    out = ck.conv2d_fwd(x.data, w.data, stride=stride, pad=pad)
    if b is not None:
        out = out + b.data[None, :, None, None]
    x_shape = x.data.shape
    w_shape = w.data.shape

    def backward(g):
        g = np.ascontiguousarray(g)
        x.accumulate(ck.conv2d_bwd_input(g, w.data, x_shape, stride=stride, pad=pad))
        w.accumulate(ck.conv2d_bwd_weight(x.data, g, w_shape, stride=stride, pad=pad))
        if b is not None:
            b.accumulate(g.sum(axis=(0, 2, 3)))

    parents = (x, w) if b is None else (x, w, b)
    return make_node(out, parents, backward)


def group_norm(x: Tensor, gamma: Tensor, beta: Tensor, groups: int, eps: float = 1e-5) -> Tensor:
    nb, c, h, w = x.data.shape
    if c % groups:
        raise ValueError(f"channels ({c}) not divisible by groups ({groups})")
    xg = x.data.reshape(nb, groups, -1)
    mu = xg.mean(axis=2, keepdims=True)
    var = xg.var(axis=2, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = ((xg - mu) * inv_std).reshape(nb, c, h, w)
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def backward(g):
        dxhat = (g * gamma.data[None, :, None, None]).reshape(nb, groups, -1)
        xh = xhat.reshape(nb, groups, -1)
        m1 = dxhat.mean(axis=2, keepdims=True)
        m2 = (dxhat * xh).mean(axis=2, keepdims=True)
        dx = (inv_std * (dxhat - m1 - xh * m2)).reshape(nb, c, h, w)
        x.accumulate(dx.astype(x.data.dtype, copy=False))
        gamma.accumulate((g * xhat).sum(axis=(0, 2, 3)))
        beta.accumulate(g.sum(axis=(0, 2, 3)))

    return make_node(out, (x, gamma, beta), backward)


def upsample_nearest2x(x: Tensor) -> Tensor:
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)
    nb, c, h, w = x.data.shape

    def backward(g):
        x.accumulate(g.reshape(nb, c, h, 2, w, 2).sum(axis=(3, 5)))

    return make_node(out, (x,), backward)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    out = np.concatenate([a.data, b.data], axis=1)
    ca = a.data.shape[1]

    def backward(g):
        a.accumulate(np.ascontiguousarray(g[:, :ca]))
        b.accumulate(np.ascontiguousarray(g[:, ca:]))

    return make_node(out, (a, b), backward)


def sinusoidal_time_embedding(t, dim: int, dtype=np.float32) -> np.ndarray:
    """Transformer-style sin/cos features of integer timesteps, shape (B, dim).

    Layout is ``[sin | cos]``, so t = 0 maps to zeros followed by ones.
    """
    if dim < 2 or dim % 2:
        raise ValueError(f"embedding dim must be even and >= 2, got {dim}")
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    if half == 1:
        freqs = np.ones(1)
    else:
        freqs = np.exp(-math.log(10000.0) * np.arange(half) / (half - 1))
    ang = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1).astype(dtype)
