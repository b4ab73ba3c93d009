"""
Differentiable primitives on channels-last (N, D, H, W, C) arrays.

Convolutions loop over kernel offsets, one matmul per offset. Weights keep the
conventional ``(C_out, C_in, kd, kh, kw)`` layout. Transposed convolution is the
adjoint of the strided convolution and shares its weight.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit

from weakseg3d.errors import InvalidArgumentError

IN_EPS = 1e-5
LEAK = 0.01


def _triple(v):
    if np.isscalar(v):
        return (int(v),) * 3
    return tuple(int(a) for a in v)


def conv_out_shape(spatial, k, stride, pad):
    out = tuple((n + 2 * p - kk) // s + 1 for n, kk, s, p in zip(spatial, k, stride, pad))
    if min(out) < 1:
        raise InvalidArgumentError(f"kernel {k} does not fit input {spatial}")
    return out


def _offsets(k, stride, out):
    """Kernel offsets with the matching strided input window slices."""
    s0, s1, s2 = stride
    o0, o1, o2 = out
    i = 0
    for a in range(k[0]):
        for b in range(k[1]):
            for e in range(k[2]):
                yield i, (slice(None), slice(a, a + s0 * o0, s0), slice(b, b + s1 * o1, s1), slice(e, e + s2 * o2, s2))
                i += 1


def _wstack(w):
    """Weight as ``(prod(k), C_in, C_out)``, one matrix per kernel offset."""
    return np.ascontiguousarray(w.transpose(2, 3, 4, 1, 0).reshape(-1, w.shape[1], w.shape[0]))


def _padded(x, pad):
    return np.pad(x, ((0, 0),) + tuple((p, p) for p in pad) + ((0, 0),)) if any(pad) else x


def conv3d(x, w, stride=1, pad=None, bias=None):
    """Cross-correlation; ``pad`` defaults to ``k // 2`` per axis."""
    if x.ndim != 5 or w.ndim != 5 or x.shape[4] != w.shape[1]:
        raise InvalidArgumentError(f"conv3d shape mismatch: x {x.shape}, w {w.shape}")
    k = w.shape[2:]
    stride = _triple(stride)
    pad = tuple(kk // 2 for kk in k) if pad is None else _triple(pad)
    out = conv_out_shape(x.shape[1:4], k, stride, pad)
    xp = _padded(x, pad)
    ws = _wstack(w)
    rows = np.zeros((x.shape[0] * out[0] * out[1] * out[2], w.shape[0]), dtype=x.dtype)
    for i, sl in _offsets(k, stride, out):
        if w.shape[1] == 1:  # outer product; cheaper as a broadcast than as a matmul
            rows += xp[sl].reshape(-1, 1) * ws[i]
        else:
            rows += xp[sl].reshape(-1, w.shape[1]) @ ws[i]
    if bias is not None:
        rows += bias
    return rows.reshape(x.shape[0], *out, w.shape[0])


def conv3d_backward(g, x, w, stride=1, pad=None, need_dx=True):
    """Gradients of ``conv3d`` wrt input and weight for upstream ``g``."""
    k = w.shape[2:]
    stride = _triple(stride)
    pad = tuple(kk // 2 for kk in k) if pad is None else _triple(pad)
    out = g.shape[1:4]
    g2 = g.reshape(-1, g.shape[4])
    xp = _padded(x, pad)
    ws = _wstack(w)
    dws = np.empty_like(ws)
    dxp = np.zeros_like(xp) if need_dx else None
    for i, sl in _offsets(k, stride, out):
        dws[i] = xp[sl].reshape(-1, w.shape[1]).T @ g2
        if need_dx:
            dxp[sl] += (g2 @ ws[i].T).reshape(x.shape[0], *out, w.shape[1])
    dw = dws.reshape(*k, w.shape[1], w.shape[0]).transpose(4, 3, 0, 1, 2)
    dx = None
    if need_dx:
        dx = dxp[:, pad[0] : pad[0] + x.shape[1], pad[1] : pad[1] + x.shape[2], pad[2] : pad[2] + x.shape[3]]
        dx = np.ascontiguousarray(dx)
    return dx, dw


def conv_transpose3d(y, w, stride, out_spatial, pad=0):
    """Adjoint of ``conv3d(., w, stride, pad)``; maps ``w.shape[0]`` channels to ``w.shape[1]``."""
    if y.ndim != 5 or y.shape[4] != w.shape[0]:
        raise InvalidArgumentError(f"conv_transpose3d shape mismatch: y {y.shape}, w {w.shape}")
    k = w.shape[2:]
    stride, pad = _triple(stride), _triple(pad)
    out = tuple(y.shape[1:4])
    if conv_out_shape(out_spatial, k, stride, pad) != out:
        raise InvalidArgumentError(f"output size {tuple(out_spatial)} inconsistent with input {out}")
    n = y.shape[0]
    padded = tuple(sz + 2 * p for sz, p in zip(out_spatial, pad))
    xp = np.zeros((n, *padded, w.shape[1]), dtype=y.dtype)
    y2 = y.reshape(-1, y.shape[4])
    ws = _wstack(w)
    for i, sl in _offsets(k, stride, out):
        xp[sl] += (y2 @ ws[i].T).reshape(n, *out, w.shape[1])
    x = xp[:, pad[0] : pad[0] + out_spatial[0], pad[1] : pad[1] + out_spatial[1], pad[2] : pad[2] + out_spatial[2]]
    return np.ascontiguousarray(x)


def conv_transpose3d_backward(g, y, w, stride, pad=0):
    """Gradients of ``conv_transpose3d`` wrt its input ``y`` and weight."""
    dy = conv3d(g, w, stride, pad)
    # <conv(g, w), y> is the same scalar, so the weight gradient is conv's with roles swapped
    _, dw = conv3d_backward(y, g, w, stride, pad, need_dx=False)
    return dy, dw


def instance_norm(x, gamma, beta, eps=IN_EPS):
    """Per (sample, channel) normalization over the spatial axes, then scale and shift."""
    axes = (1, 2, 3)
    mu = x.mean(axis=axes, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    return xhat * gamma + beta, (xhat, inv)


def instance_norm_backward(g, ctx, gamma):
    xhat, inv = ctx
    axes = (1, 2, 3)
    dgamma = (g * xhat).sum(axis=(0,) + axes)
    dbeta = g.sum(axis=(0,) + axes)
    dxhat = g * gamma
    dx = inv * (dxhat - dxhat.mean(axis=axes, keepdims=True) - xhat * (dxhat * xhat).mean(axis=axes, keepdims=True))
    return dx, dgamma, dbeta


def leaky_relu(x, slope=LEAK):
    return np.where(x > 0, x, x * slope)


def leaky_relu_backward(g, x, slope=LEAK):
    return np.where(x > 0, g, g * slope)


def sigmoid(x):
    return expit(x)
