"""Dense tensor primitives over (batch, channel, time, vertex) arrays.

Each forward op has a matching ``*_backward`` that maps the upstream
gradient to gradients of its inputs. Nothing here holds state.
"""
from __future__ import annotations

import numpy as np

__all__ = [
    "ShapeError",
    "pointwise_conv", "pointwise_conv_backward",
    "temporal_conv", "temporal_conv_backward",
    "graph_apply", "graph_apply_backward",
    "batch_norm_train", "batch_norm_eval", "batch_norm_backward",
    "relu", "relu_backward",
    "max_pool_time", "max_pool_time_backward",
    "global_avg_pool", "global_avg_pool_backward",
    "motion_sampling", "motion_sampling_backward",
    "softmax", "softmax_cross_entropy",
]


class ShapeError(ValueError):
    pass


def _check_rank4(x, what="input"):
    if x.ndim != 4:
        raise ShapeError(f"{what} must be rank 4 (N, C, T, V), got shape {x.shape}")


# -- 1x1 convolution -------------------------------------------------------

def pointwise_conv(x, w, b=None):
    """``y[n,o,t,v] = sum_c w[o,c] x[n,c,t,v] + b[o]``."""
    _check_rank4(x)
    if w.shape[1] != x.shape[1]:
        raise ShapeError(f"pointwise conv expects {w.shape[1]} input channels, got {x.shape[1]}")
    n, c, t, v = x.shape
    y = np.matmul(w, x.reshape(n, c, t * v)).reshape(n, w.shape[0], t, v)
    if b is not None:
        y += b[None, :, None, None]
    return y


def pointwise_conv_backward(dy, x, w):
    """Returns ``(dx, dw, db)``."""
    n, o, t, v = dy.shape
    dy2 = dy.reshape(n, o, t * v)
    x2 = x.reshape(n, x.shape[1], t * v)
    dx = np.matmul(w.T, dy2).reshape(x.shape)
    dw = np.tensordot(dy2, x2, axes=([0, 2], [0, 2]))
    db = dy2.sum(axis=(0, 2))
    return dx, dw, db


# -- temporal convolution ------------------------------------------------

def _check_kernel(k):
    if k % 2 == 0:
        raise ShapeError(f"temporal kernel length must be odd, got {k}")


def temporal_conv(x, w, b=None):
    """Same-length convolution along time with zero padding.

    ``w`` has shape (C_out, C_in, k); tap ``j`` reads frame ``t + j - (k-1)/2``.
    """
    _check_rank4(x)
    o, c, k = w.shape
    _check_kernel(k)
    if c != x.shape[1]:
        raise ShapeError(f"temporal conv expects {c} input channels, got {x.shape[1]}")
    n, _, t, v = x.shape
    p = (k - 1) // 2
    xp = np.zeros((n, c, t + 2 * p, v), dtype=x.dtype)
    xp[:, :, p:p + t] = x
    y = np.zeros((n, o, t * v), dtype=np.result_type(x, w))
    for j in range(k):
        y += np.matmul(w[:, :, j], xp[:, :, j:j + t].reshape(n, c, t * v))
    y = y.reshape(n, o, t, v)
    if b is not None:
        y += b[None, :, None, None]
    return y


def temporal_conv_backward(dy, x, w):
    o, c, k = w.shape
    n, _, t, v = x.shape
    p = (k - 1) // 2
    xp = np.zeros((n, c, t + 2 * p, v), dtype=x.dtype)
    xp[:, :, p:p + t] = x
    dy2 = dy.reshape(n, o, t * v)
    dxp = np.zeros_like(xp)
    dw = np.empty_like(w)
    for j in range(k):
        dxp[:, :, j:j + t] += np.matmul(w[:, :, j].T, dy2).reshape(n, c, t, v)
        dw[:, :, j] = np.tensordot(dy2, xp[:, :, j:j + t].reshape(n, c, t * v),
                                   axes=([0, 2], [0, 2]))
    return dxp[:, :, p:p + t], dw, dy2.sum(axis=(0, 2))


# -- vertex mixing -------------------------------------------------------

def graph_apply(x, m):
    """``y[n,c,t,u] = sum_v m[u,v] x[n,c,t,v]``.

    ``m`` is either one (V, V) matrix or a per-sample stack (N, V, V).
    """
    _check_rank4(x)
    if m.shape[-1] != x.shape[3] or m.shape[-2] != x.shape[3]:
        raise ShapeError(f"graph matrix of size {m.shape[-1]} applied to {x.shape[3]} vertices")
    if m.ndim == 2:
        return x @ m.T
    return x @ np.swapaxes(m, 1, 2)[:, None]


def graph_apply_backward(dy, x, m):
    """Returns ``(dx, dm)``; ``dm`` matches the shape of ``m``."""
    if m.ndim == 2:
        dx = dy @ m
        dm = np.tensordot(dy, x, axes=([0, 1, 2], [0, 1, 2]))
    else:
        dx = dy @ m[:, None]
        dm = np.einsum("nctu,nctv->nuv", dy, x, optimize=True)
    return dx, dm


# -- batch normalization -------------------------------------------------

def _bn_shape(x, feature_axes):
    reduce_axes = tuple(a for a in range(x.ndim) if a not in feature_axes)
    bshape = tuple(x.shape[a] if a in feature_axes else 1 for a in range(x.ndim))
    return reduce_axes, bshape


def batch_norm_train(x, gamma, beta, feature_axes=(1,), eps=1e-5):
    """Normalize with biased batch statistics over the non-feature axes.

    Returns ``(y, cache, mean, var)``; ``var`` is the biased estimate.
    """
    reduce_axes, bshape = _bn_shape(x, feature_axes)
    mean = x.mean(axis=reduce_axes, keepdims=True)
    xc = x - mean
    var = (xc * xc).mean(axis=reduce_axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat * gamma.reshape(bshape) + beta.reshape(bshape)
    return y, (xhat, inv, gamma.reshape(bshape), reduce_axes, True), mean.reshape(gamma.shape), var.reshape(gamma.shape)


def batch_norm_eval(x, gamma, beta, running_mean, running_var, feature_axes=(1,), eps=1e-5):
    reduce_axes, bshape = _bn_shape(x, feature_axes)
    inv = 1.0 / np.sqrt(running_var.reshape(bshape) + eps)
    xhat = (x - running_mean.reshape(bshape)) * inv
    y = xhat * gamma.reshape(bshape) + beta.reshape(bshape)
    return y, (xhat, inv, gamma.reshape(bshape), reduce_axes, False)


def batch_norm_backward(dy, cache):
    """Returns ``(dx, dgamma, dbeta)``."""
    xhat, inv, g, reduce_axes, train = cache
    dgamma = (dy * xhat).sum(axis=reduce_axes).reshape(-1)
    dbeta = dy.sum(axis=reduce_axes).reshape(-1)
    dxhat = dy * g
    if not train:
        return dxhat * inv, dgamma, dbeta
    mean_dxhat = dxhat.mean(axis=reduce_axes, keepdims=True)
    mean_dxhat_xhat = (dxhat * xhat).mean(axis=reduce_axes, keepdims=True)
    dx = inv * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat)
    return dx, dgamma, dbeta


# -- elementwise and pooling ---------------------------------------------

def relu(x):
    return np.maximum(x, 0)


def relu_backward(dy, x):
    return dy * (x > 0)


def max_pool_time(x, window=2, stride=2):
    """Non-overlapping max pooling along time; a trailing partial window is dropped."""
    if window != stride:
        raise ValueError("only non-overlapping windows (window == stride) are supported")
    n, c, t, v = x.shape
    to = t // window
    if to < 1:
        raise ShapeError(f"cannot pool {t} frames with window {window}")
    xw = x[:, :, :to * window].reshape(n, c, to, window, v)
    idx = xw.argmax(axis=3)
    y = np.take_along_axis(xw, idx[:, :, :, None], axis=3)[:, :, :, 0]
    return y, idx


def max_pool_time_backward(dy, idx, t_in, window=2):
    n, c, to, v = dy.shape
    dxw = np.zeros((n, c, to, window, v), dtype=dy.dtype)
    np.put_along_axis(dxw, idx[:, :, :, None], dy[:, :, :, None], axis=3)
    dx = np.zeros((n, c, t_in, v), dtype=dy.dtype)
    dx[:, :, :to * window] = dxw.reshape(n, c, to * window, v)
    return dx


def global_avg_pool(x):
    return x.mean(axis=(2, 3))


def global_avg_pool_backward(dy, shape):
    n, c, t, v = shape
    return np.broadcast_to(dy[:, :, None, None] / (t * v), shape).copy()


def motion_sampling(x):
    """Frame differences ``x[t+1] - x[t]`` with a zero final frame."""
    y = np.zeros_like(x)
    y[:, :, :-1] = x[:, :, 1:] - x[:, :, :-1]
    return y


def motion_sampling_backward(dy):
    dx = np.zeros_like(dy)
    dx[:, :, 1:] += dy[:, :, :-1]
    dx[:, :, :-1] -= dy[:, :, :-1]
    return dx


# -- classifier head -----------------------------------------------------

def softmax(z, axis=-1):
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy over the batch and its gradient w.r.t. ``logits``."""
    logits = np.asarray(logits)
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"expected {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        bad = labels[(labels < 0) | (labels >= k)][0]
        raise ValueError(f"label {bad} outside [0, {k})")
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = float(np.mean(logsum - z[rows, labels]))
    grad = np.exp(z - logsum[:, None])
    grad[rows, labels] -= 1.0
    return loss, grad / n
