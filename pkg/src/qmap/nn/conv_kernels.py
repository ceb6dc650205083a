"""2-D convolution primitives with numba and numpy implementations.

Forward, input-gradient and weight-gradient kernels for NCHW tensors and
OIHW weights.  The numba path hand-unrolls the 3x3 taps (the only kernel
size on the network's hot path) so the inner loop vectorises well on a
single core; everything else falls through to a generic loop.  The numpy
path lowers to im2col + matmul so it runs on BLAS.  1x1 convolutions are
plain channel matmuls and always use BLAS.

Dispatch between the paths is decided by :mod:`qmap.backend`.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .. import backend


def _out_hw(h, w, kh, kw, stride, pad):
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ValueError(f"conv output would be empty for input {h}x{w}, kernel {kh}x{kw}")
    return ho, wo


def _pad_input(x, pad):
    if pad == 0:
        return np.ascontiguousarray(x)
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


# ---------------------------------------------------------------------------
# numpy path (im2col + BLAS)


def _im2col(xp, kh, kw, stride):
    b, c, hp, wp = xp.shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    sb, sc, sh, sw = xp.strides
    view = as_strided(
        xp,
        shape=(b, c, kh, kw, ho, wo),
        strides=(sb, sc, sh, sw, sh * stride, sw * stride),
    )
    return view.reshape(b, c * kh * kw, ho * wo), ho, wo


def _col2im(gcols, x_shape, kh, kw, stride, pad):
    b, c, h, w = x_shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    dxp = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=gcols.dtype)
    g = gcols.reshape(b, c, kh, kw, ho, wo)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += g[:, :, i, j]
    if pad == 0:
        return dxp
    return dxp[:, :, pad : pad + h, pad : pad + w]


def _fwd_np(x, w, stride, pad):
    co = w.shape[0]
    cols, ho, wo = _im2col(_pad_input(x, pad), w.shape[2], w.shape[3], stride)
    y = np.matmul(w.reshape(co, -1)[None], cols)
    return y.reshape(x.shape[0], co, ho, wo)


def _bwd_input_np(dy, w, x_shape, stride, pad):
    b, co, ho, wo = dy.shape
    gcols = np.matmul(w.reshape(co, -1).T[None], dy.reshape(b, co, ho * wo))
    return _col2im(gcols, x_shape, w.shape[2], w.shape[3], stride, pad)


def _bwd_weight_np(x, dy, w_shape, stride, pad):
    b, co, ho, wo = dy.shape
    cols, _, _ = _im2col(_pad_input(x, pad), w_shape[2], w_shape[3], stride)
    dw = np.matmul(dy.reshape(b, co, ho * wo), cols.transpose(0, 2, 1)).sum(axis=0)
    return dw.reshape(w_shape)


# ---------------------------------------------------------------------------
# numba path

if backend.HAS_NUMBA:
    from numba import njit

    @njit(cache=True, fastmath=True)
    def _fwd_3x3_nb(xp, w):
        nb, nc, hp, wp = xp.shape
        co = w.shape[0]
        ho = hp - 2
        wo = wp - 2
        y = np.zeros((nb, co, ho, wo), dtype=xp.dtype)
        for b in range(nb):
            for o in range(co):
                for c in range(nc):
                    w00 = w[o, c, 0, 0]
                    w01 = w[o, c, 0, 1]
                    w02 = w[o, c, 0, 2]
                    w10 = w[o, c, 1, 0]
                    w11 = w[o, c, 1, 1]
                    w12 = w[o, c, 1, 2]
                    w20 = w[o, c, 2, 0]
                    w21 = w[o, c, 2, 1]
                    w22 = w[o, c, 2, 2]
                    for i in range(ho):
                        r0 = xp[b, c, i]
                        r1 = xp[b, c, i + 1]
                        r2 = xp[b, c, i + 2]
                        yr = y[b, o, i]
                        for j in range(wo):
                            yr[j] += (
                                w00 * r0[j] + w01 * r0[j + 1] + w02 * r0[j + 2]
                                + w10 * r1[j] + w11 * r1[j + 1] + w12 * r1[j + 2]
                                + w20 * r2[j] + w21 * r2[j + 1] + w22 * r2[j + 2]
                            )
        return y

    @njit(cache=True, fastmath=True)
    def _fwd_generic_nb(xp, w, stride):
        nb, nc, hp, wp = xp.shape
        co, _, kh, kw = w.shape
        ho = (hp - kh) // stride + 1
        wo = (wp - kw) // stride + 1
        y = np.zeros((nb, co, ho, wo), dtype=xp.dtype)
        for b in range(nb):
            for o in range(co):
                for c in range(nc):
                    for ki in range(kh):
                        for kj in range(kw):
                            wv = w[o, c, ki, kj]
                            for i in range(ho):
                                ii = i * stride + ki
                                for j in range(wo):
                                    y[b, o, i, j] += wv * xp[b, c, ii, j * stride + kj]
        return y

    @njit(cache=True, fastmath=True)
    def _bwd_input_generic_nb(dy, w, stride, hp, wp):
        nb, co, ho, wo = dy.shape
        nc, kh, kw = w.shape[1], w.shape[2], w.shape[3]
        dxp = np.zeros((nb, nc, hp, wp), dtype=dy.dtype)
        for b in range(nb):
            for o in range(co):
                for c in range(nc):
                    for ki in range(kh):
                        for kj in range(kw):
                            wv = w[o, c, ki, kj]
                            for i in range(ho):
                                ii = i * stride + ki
                                for j in range(wo):
                                    dxp[b, c, ii, j * stride + kj] += wv * dy[b, o, i, j]
        return dxp

    @njit(cache=True, fastmath=True)
    def _bwd_weight_3x3_nb(xp, dy):
        nb, nc, hp, wp = xp.shape
        co, ho, wo = dy.shape[1], dy.shape[2], dy.shape[3]
        dw = np.zeros((co, nc, 3, 3), dtype=xp.dtype)
        for b in range(nb):
            for o in range(co):
                for c in range(nc):
                    a00 = 0.0
                    a01 = 0.0
                    a02 = 0.0
                    a10 = 0.0
                    a11 = 0.0
                    a12 = 0.0
                    a20 = 0.0
                    a21 = 0.0
                    a22 = 0.0
                    for i in range(ho):
                        gr = dy[b, o, i]
                        r0 = xp[b, c, i]
                        r1 = xp[b, c, i + 1]
                        r2 = xp[b, c, i + 2]
                        for j in range(wo):
                            g = gr[j]
                            a00 += g * r0[j]
                            a01 += g * r0[j + 1]
                            a02 += g * r0[j + 2]
                            a10 += g * r1[j]
                            a11 += g * r1[j + 1]
                            a12 += g * r1[j + 2]
                            a20 += g * r2[j]
                            a21 += g * r2[j + 1]
                            a22 += g * r2[j + 2]
                    dw[o, c, 0, 0] += a00
                    dw[o, c, 0, 1] += a01
                    dw[o, c, 0, 2] += a02
                    dw[o, c, 1, 0] += a10
                    dw[o, c, 1, 1] += a11
                    dw[o, c, 1, 2] += a12
                    dw[o, c, 2, 0] += a20
                    dw[o, c, 2, 1] += a21
                    dw[o, c, 2, 2] += a22
        return dw

    @njit(cache=True, fastmath=True)
    def _bwd_weight_generic_nb(xp, dy, stride, kh, kw):
        nb, nc = xp.shape[0], xp.shape[1]
        co, ho, wo = dy.shape[1], dy.shape[2], dy.shape[3]
        dw = np.zeros((co, nc, kh, kw), dtype=xp.dtype)
        for b in range(nb):
            for o in range(co):
                for c in range(nc):
                    for ki in range(kh):
                        for kj in range(kw):
                            acc = 0.0
                            for i in range(ho):
                                ii = i * stride + ki
                                for j in range(wo):
                                    acc += dy[b, o, i, j] * xp[b, c, ii, j * stride + kj]
                            dw[o, c, ki, kj] += acc
        return dw


# ---------------------------------------------------------------------------
# public dispatchers


def _is_1x1(w_shape, stride, pad):
    return w_shape[2] == 1 and w_shape[3] == 1 and stride == 1 and pad == 0


def conv2d_fwd(x, w, stride=1, pad=0):
    """Cross-correlate ``x`` (B,C,H,W) with ``w`` (O,C,KH,KW)."""
    if x.shape[1] != w.shape[1]:
        raise ValueError(f"channel mismatch: input {x.shape[1]}, weight expects {w.shape[1]}")
    _out_hw(x.shape[2], x.shape[3], w.shape[2], w.shape[3], stride, pad)
    if _is_1x1(w.shape, stride, pad):
        b, c, h, ww = x.shape
        y = np.matmul(w.reshape(w.shape[0], c)[None], x.reshape(b, c, h * ww))
        return y.reshape(b, w.shape[0], h, ww)
    if backend.use_numba():
        xp = _pad_input(x, pad)
        w = np.ascontiguousarray(w)
        if w.shape[2] == 3 and w.shape[3] == 3 and stride == 1:
            return _fwd_3x3_nb(xp, w)
        return _fwd_generic_nb(xp, w, stride)
    return _fwd_np(x, w, stride, pad)


def conv2d_bwd_input(dy, w, x_shape, stride=1, pad=0):
    """Gradient of the convolution output w.r.t. its input."""
    if _is_1x1(w.shape, stride, pad):
        b, co, h, ww = dy.shape
        dx = np.matmul(w.reshape(co, -1).T[None], dy.reshape(b, co, h * ww))
        return dx.reshape(x_shape)
    if backend.use_numba():
        hp = x_shape[2] + 2 * pad
        wp = x_shape[3] + 2 * pad
        if w.shape[2] == 3 and w.shape[3] == 3 and stride == 1:
            # stride-1 input gradient == forward correlation of the padded
            # gradient with the 180-degree-rotated, channel-swapped weight,
            # so the vectorised forward kernel does double duty (the direct
            # formulation is a scatter and does not vectorise).
            wt = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
            dxp = _fwd_3x3_nb(_pad_input(dy, 2), wt)
        else:
            dxp = _bwd_input_generic_nb(
                np.ascontiguousarray(dy), np.ascontiguousarray(w), stride, hp, wp
            )
        if pad == 0:
            return dxp
        return np.ascontiguousarray(dxp[:, :, pad : pad + x_shape[2], pad : pad + x_shape[3]])
    return _bwd_input_np(dy, w, x_shape, stride, pad)


def conv2d_bwd_weight(x, dy, w_shape, stride=1, pad=0):
    """Gradient of the convolution output w.r.t. the weight."""
    if _is_1x1(w_shape, stride, pad):
        b, c, h, ww = x.shape
        co = dy.shape[1]
        dw = np.matmul(dy.reshape(b, co, h * ww), x.reshape(b, c, h * ww).transpose(0, 2, 1))
        return dw.sum(axis=0).reshape(w_shape)
    if backend.use_numba():
        xp = _pad_input(x, pad)
        dy = np.ascontiguousarray(dy)
        if w_shape[2] == 3 and w_shape[3] == 3 and stride == 1:
            return _bwd_weight_3x3_nb(xp, dy).astype(x.dtype, copy=False)
        return _bwd_weight_generic_nb(xp, dy, stride, w_shape[2], w_shape[3]).astype(x.dtype, copy=False)
    return _bwd_weight_np(x, dy, w_shape, stride, pad)
