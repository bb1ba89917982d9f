"""Layer-level differentiable ops on NCHW images and row-major batches."""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import DegenerateInputError, DimensionError
from .tensor import add, as_tensor, make, matmul, reshape

NORM_EPS = 1e-12


def dense(x, W, b=None):
    x = as_tensor(x, W)
    if x.shape[-1] != W.shape[0]:
        raise DimensionError(f"dense: input has {x.shape[-1]} features, weight expects {W.shape[0]}")
    out = matmul(x, W)
    return out if b is None else add(out, b)


def _windows(xp, k, stride):
    w = sliding_window_view(xp, (k, k), axis=(2, 3))
    return w[:, :, ::stride, ::stride]


def conv2d(x, W, b=None, stride=1, pad=0):
    """``x`` is ``(N, C, H, W)``, ``W`` is ``(C_out, C, k, k)``."""
    x = as_tensor(x, W)
    if x.data.ndim != 4 or W.data.ndim != 4 or x.shape[1] != W.shape[1] or W.shape[2] != W.shape[3]:
        raise DimensionError(f"conv2d: incompatible input {x.shape} and kernel {W.shape}")
    N, C, H, Wd = x.shape
    co, _, k, _ = W.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    win = _windows(xp, k, stride)
    Ho, Wo = win.shape[2], win.shape[3]
    if Ho < 1 or Wo < 1:
        raise DimensionError("conv2d: kernel larger than padded input")
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(N * Ho * Wo, C * k * k)
    Wm = W.data.reshape(co, -1)
    out = (cols @ Wm.T).reshape(N, Ho, Wo, co).transpose(0, 3, 1, 2)
    if b is not None:
        out = out + b.data.reshape(1, co, 1, 1)
    parents = (x, W) if b is None else (x, W, b)

    def back(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, co)
        gW = (gm.T @ cols).reshape(W.shape)
        gcols = (gm @ Wm).reshape(N, Ho, Wo, C, k, k)
        gxp = np.zeros(xp.shape, dtype=xp.dtype)
        for i in range(k):
            for j in range(k):
                gxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += gcols[..., i, j].transpose(0, 3, 1, 2)
        gx = gxp[:, :, pad:pad + H, pad:pad + Wd] if pad else gxp
        if b is None:
            return gx, gW
        return gx, gW, g.sum(axis=(0, 2, 3))

    return make(np.ascontiguousarray(out), parents, back)


def gram(z):
    """Row Gram matrix ``z z^T``."""
    z = as_tensor(z)
    return make(z.data @ z.data.T, (z,), lambda g: ((g + g.T) @ z.data,))


def max_pool2d(x, k=2, stride=None):
    x = as_tensor(x)
    stride = stride or k
    N, C, H, W = x.shape
    win = _windows(x.data, k, stride)
    Ho, Wo = win.shape[2], win.shape[3]
    flat = win.reshape(N, C, Ho, Wo, k * k)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def back(g):
        gx = np.zeros_like(x.data)
        di, dj = np.divmod(arg, k)
        n, c, i, j = np.indices(arg.shape)
        np.add.at(gx, (n, c, i * stride + di, j * stride + dj), g)
        return (gx,)

    return make(out, (x,), back)


def flatten(x):
    x = as_tensor(x)
    return reshape(x, (x.shape[0], -1))


def l2_normalize(x, axis=-1):
    x = as_tensor(x)
    norm = np.sqrt(np.sum(x.data * x.data, axis=axis, keepdims=True))
    if np.any(norm < NORM_EPS):
        raise DegenerateInputError("l2_normalize: vector with norm below 1e-12")
    y = x.data / norm

    def back(g):
        return ((g - y * np.sum(g * y, axis=axis, keepdims=True)) / norm,)

    return make(y, (x,), back)


def log_softmax_rows(logits, mask=None):
    """Row-wise log-softmax; entries where ``mask`` is False are excluded (output 0 there)."""
    z = as_tensor(logits)
    keep = np.ones(z.shape, bool) if mask is None else np.asarray(mask, bool)
    zm = np.where(keep, z.data, -np.inf)
    mx = zm.max(axis=1, keepdims=True)
    e = np.where(keep, np.exp(zm - mx), 0)
    s = e.sum(axis=1, keepdims=True)
    p = e / s
    out = np.where(keep, z.data - mx - np.log(s), 0).astype(z.dtype)

    def back(g):
        g = np.where(keep, g, 0)
        return ((g - p * g.sum(axis=1, keepdims=True)).astype(z.dtype),)

    return make(out, (z,), back)


def softmax_cross_entropy_rows(logits, targets, mask=None):
    """Mean over rows of ``-log softmax(logits)[row, targets[row]]``.

    ``mask`` removes candidates from each row's softmax denominator; a
    row's target must stay unmasked.
    """
    z = as_tensor(logits)
    targets = np.asarray(targets)
    if z.data.ndim != 2 or targets.shape != (z.shape[0],):
        raise DimensionError(f"cross entropy: logits {z.shape} vs targets {targets.shape}")
    rows = np.arange(z.shape[0])
    if mask is not None and not np.all(np.asarray(mask)[rows, targets]):
        raise DimensionError("cross entropy: a target entry is masked out")
    ls = log_softmax_rows(z, mask)
    pick = np.zeros(z.shape, dtype=z.dtype)
    pick[rows, targets] = -1.0 / z.shape[0]
    return make(np.asarray((ls.data * pick).sum(), dtype=z.dtype), (ls,), lambda g: (g * pick,))

