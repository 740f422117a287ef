"""Differentiable operations used by the recovery network and classifier.

Every op takes :class:`Tensor` (or array-like) inputs and returns a new
``Tensor``; backward closures return one gradient per parent.  Image ops use
the ``(batch, channel, height, width)`` layout; unbatched ``(C, H, W)``
inputs are accepted and returned unbatched.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, as_tensor, make, report_kink


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# --- elementwise arithmetic ---------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make(a.data + b.data, (a, b), backward)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make(a.data - b.data, (a, b), backward)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make(a.data * b.data, (a, b), backward)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make(out, (a, b), backward)


def square(x):
    x = as_tensor(x)
    return make(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,))


def exp(x):
    x = as_tensor(x)
    out = np.exp(x.data)
    return make(out, (x,), lambda g: (g * out,))


def log(x):
    x = as_tensor(x)
    return make(np.log(x.data), (x,), lambda g: (g / x.data,))


def sqrt(x):
    x = as_tensor(x)
    out = np.sqrt(x.data)
    return make(out, (x,), lambda g: (0.5 * g / out,))


def tanh(x):
    x = as_tensor(x)
    out = np.tanh(x.data)
    return make(out, (x,), lambda g: (g * (1.0 - out * out),))


def _sigmoid(v):
    return 0.5 * (np.tanh(0.5 * v) + 1.0)


def sigmoid(x):
    x = as_tensor(x)
    out = _sigmoid(x.data)
    return make(out, (x,), lambda g: (g * out * (1.0 - out),))


def relu(x):
    x = as_tensor(x)
    mask = x.data > 0
    report_kink(lambda: np.abs(x.data).min() if x.data.size else np.inf, branch=mask)
    return make(x.data * mask, (x,), lambda g: (g * mask,))


def leaky_relu(x, slope=0.01):
    x = as_tensor(x)
    report_kink(lambda: np.abs(x.data).min() if x.data.size else np.inf, branch=x.data > 0)
    factor = np.where(x.data > 0, 1.0, slope).astype(x.data.dtype)
    return make(x.data * factor, (x,), lambda g: (g * factor,))


def clip(x, lo, hi):
    x = as_tensor(x)
    inside = (x.data >= lo) & (x.data <= hi)
    report_kink(lambda: np.minimum(np.abs(x.data - lo), np.abs(x.data - hi)).min(), branch=inside)
    return make(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,))


def maximum(x, floor):
    """Elementwise ``max(x, floor)`` against a scalar floor."""
    x = as_tensor(x)
    above = x.data > floor
    report_kink(lambda: np.abs(x.data - floor).min(), branch=above)
    return make(np.where(above, x.data, floor).astype(x.data.dtype), (x,), lambda g: (g * above,))


# --- reductions and shape ops ---------------------------------------------------

def sum(x, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy
    x = as_tensor(x)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return make(x.data.sum(axis=axis, keepdims=keepdims), (x,), backward)


def mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    count = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(x, shape):
    x = as_tensor(x)
    return make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes):
    x = as_tensor(x)
    inverse = np.argsort(axes)
    return make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inverse),))


def _is_basic_index(index):
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def getitem(x, index):
    x = as_tensor(x)
    basic = _is_basic_index(index)

    def backward(g):
        full = np.zeros_like(x.data)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        return (full,)

    return make(x.data[index], (x,), backward)


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return make(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]

    def backward(g):
        return tuple(np.moveaxis(g, axis, 0))

    return make(np.stack([t.data for t in tensors], axis=axis), tensors, backward)


# --- softmax family ------------------------------------------------------------

def softmax(x, axis=-1):
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make(out, (x,), backward)


def log_softmax(x, axis=-1):
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return make(out, (x,), backward)


def logsumexp(x, axis=-1):
    x = as_tensor(x)
    peak = x.data.max(axis=axis, keepdims=True)
    s = np.exp(x.data - peak).sum(axis=axis, keepdims=True)
    out_keep = peak + np.log(s)

    def backward(g):
        return (np.expand_dims(g, axis) * np.exp(x.data - out_keep),)

    return make(np.squeeze(out_keep, axis=axis), (x,), backward)


# --- affine ----------------------------------------------------------------------

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return make(a.data @ b.data, (a, b), backward)


def linear(x, weight, bias=None):
    """``x @ weight.T + bias`` with ``weight`` shaped ``(out, in)``."""
    x, weight = as_tensor(x), as_tensor(weight)
    out = x.data @ weight.data.T
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data
        parents.append(bias)

    def backward(g):
        gx = g @ weight.data if x.requires_grad else None
        flat_g = g.reshape(-1, g.shape[-1])
        gw = flat_g.T @ x.data.reshape(-1, x.shape[-1]) if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, flat_g.sum(axis=0)

    return make(out, parents, backward)


# --- convolution and pooling --------------------------------------------------------

def conv2d(x, weight, bias=None):
    """Stride-1, same-padded cross-correlation with an odd square kernel."""
    x, weight = as_tensor(x), as_tensor(weight)
    unbatched = x.ndim == 3
    xd = x.data[None] if unbatched else x.data
    if xd.ndim != 4:
        raise ValueError(f"conv2d expects (B,C,H,W) or (C,H,W) input, got shape {x.shape}")
    n, c, h, w = xd.shape
    c_out, c_in, kh, kw = weight.shape
    if c_in != c:
        raise ValueError(f"conv2d: input has {c} channels, kernels expect {c_in}")
    if kh != kw or kh % 2 == 0:
        raise ValueError(f"conv2d: kernel must be odd and square, got {kh}x{kw}")
    pad = kh // 2
    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((n, c, kh, kw, h, w), dtype=xd.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + h, j:j + w]
    cols = cols.reshape(n, c * kh * kw, h * w)
    wmat = weight.data.reshape(c_out, -1)
    out = np.matmul(wmat, cols)
    if bias is not None:
        bias = as_tensor(bias)
        out += bias.data[None, :, None]
    out = out.reshape(n, c_out, h, w)
    if unbatched:
        out = out[0]
    parents = [x, weight] + ([bias] if bias is not None else [])

    def backward(g):
        g = g.reshape(n, c_out, h * w)
        gx = gw = None
        if weight.requires_grad:
            gw = np.tensordot(g, cols, axes=([0, 2], [0, 2])).reshape(weight.shape)
        if x.requires_grad:
            gcols = np.matmul(wmat.T, g).reshape(n, c, kh, kw, h, w)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + h, j:j + w] += gcols[:, :, i, j]
            gx = gxp[:, :, pad:pad + h, pad:pad + w]
            if unbatched:
                gx = gx[0]
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2)))
        return tuple(grads)

    return make(out, parents, backward)


def maxpool2d(x):
    """2x2 max pooling with stride 2; ties go to the first window element
    in row-major order."""
    x = as_tensor(x)
    unbatched = x.ndim == 3
    xd = x.data[None] if unbatched else x.data
    n, c, h, w = xd.shape
    if h % 2 or w % 2:
        raise ValueError(f"maxpool2d needs even spatial dims, got {h}x{w}")
    windows = xd.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    arg = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, arg[..., None], axis=-1)[..., 0]

    def margin():
        # exact ties come from identical receptive fields and move together
        ordered = np.sort(windows, axis=-1)
        top = ordered[..., -1:]
        below = np.where(ordered < top, ordered, -np.inf).max(axis=-1)
        return (top[..., 0] - below).min()

    report_kink(margin, kind="pool", branch=arg)
    if unbatched:
        out = out[0]

    def backward(g):
        g = g[None] if unbatched else g
        gw = np.zeros_like(windows)
        np.put_along_axis(gw, arg[..., None], g[..., None], axis=-1)
        gx = gw.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (gx[0] if unbatched else gx,)

    return make(out, (x,), backward)


# --- normalization ------------------------------------------------------------------

@dataclass
class BatchNormState:
    """Per-channel running statistics; ``None`` until initialized."""

    running_mean: np.ndarray | None = None
    running_var: np.ndarray | None = None
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def fresh(cls, channels, dtype=np.float32):
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))


def batchnorm(x, gamma, beta, state: BatchNormState, training: bool):
    """Batch normalization over (batch, height, width) per channel.

    In training mode batch statistics are used and the running statistics
    in ``state`` are updated in place; in eval mode the running statistics
    are used and nothing is mutated.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.ndim != 4:
        raise ValueError(f"batchnorm expects (B,C,H,W) input, got shape {x.shape}")
    shape = (1, -1, 1, 1)
    if training:
        count = x.shape[0] * x.shape[2] * x.shape[3]
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        inv_std = 1.0 / np.sqrt(var + state.eps)
        xhat = (x.data - mu.reshape(shape)) * inv_std.reshape(shape)
        if state.running_mean is None:
            state.running_mean = np.zeros_like(mu)
            state.running_var = np.ones_like(var)
        m = state.momentum
        unbiased = var * count / max(count - 1, 1)
        state.running_mean = ((1 - m) * state.running_mean + m * mu).astype(state.running_mean.dtype)
        state.running_var = ((1 - m) * state.running_var + m * unbiased).astype(state.running_var.dtype)

        def backward(g):
            gxhat = g * gamma.data.reshape(shape)
            gx = None
            if x.requires_grad:
                s1 = gxhat.sum(axis=(0, 2, 3), keepdims=True)
                s2 = (gxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
                gx = inv_std.reshape(shape) / count * (count * gxhat - s1 - xhat * s2)
            return gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))
    else:
        if state.running_mean is None or state.running_var is None:
            raise RuntimeError("batchnorm in eval mode needs initialized running statistics")
        inv_std = 1.0 / np.sqrt(state.running_var.astype(x.dtype) + state.eps)
        xhat = (x.data - state.running_mean.astype(x.dtype).reshape(shape)) * inv_std.reshape(shape)

        def backward(g):
            gx = g * (gamma.data * inv_std).reshape(shape)
            return gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    out = gamma.data.reshape(shape) * xhat + beta.data.reshape(shape)
    return make(out.astype(x.dtype), (x, gamma, beta), backward)


# --- recurrent cell -----------------------------------------------------------------

def lstm_cell(x, h, c, weight, bias):
    """One LSTM step.

    ``weight`` is ``(4H, D_in + H)`` acting on ``concat(x, h)``; gate blocks
    are ordered input, forget, cell, output.  Returns a tensor stacking
    ``(h', c')`` along a new leading axis.
    """
    x, h, c, weight, bias = (as_tensor(t) for t in (x, h, c, weight, bias))
    unbatched = x.ndim == 1
    xd, hd, cd = (t.data[None] if unbatched else t.data for t in (x, h, c))
    hidden = hd.shape[-1]
    if weight.shape != (4 * hidden, xd.shape[-1] + hidden):
        raise ValueError(
            f"lstm_cell: weight shape {weight.shape} does not match input {xd.shape[-1]} / hidden {hidden}"
        )
    xh = np.concatenate([xd, hd], axis=-1)
    z = xh @ weight.data.T + bias.data
    i = _sigmoid(z[:, :hidden])
    f = _sigmoid(z[:, hidden:2 * hidden])
    gg = np.tanh(z[:, 2 * hidden:3 * hidden])
    o = _sigmoid(z[:, 3 * hidden:])
    c_new = f * cd + i * gg
    tc = np.tanh(c_new)
    h_new = o * tc
    out = np.stack([h_new, c_new])
    if unbatched:
        out = out[:, 0]

    def backward(grad):
        if unbatched:
            grad = grad[:, None]
        gh, gc = grad[0], grad[1]
        gc = gc + gh * o * (1.0 - tc * tc)
        dz = np.concatenate(
            [
                gc * gg * i * (1.0 - i),
                gc * cd * f * (1.0 - f),
                gc * i * (1.0 - gg * gg),
                gh * tc * o * (1.0 - o),
            ],
            axis=-1,
        )
        gxh = dz @ weight.data
        gx, gh_prev = gxh[:, :xd.shape[-1]], gxh[:, xd.shape[-1]:]
        gc_prev = gc * f
        if unbatched:
            gx, gh_prev, gc_prev = gx[0], gh_prev[0], gc_prev[0]
        return gx, gh_prev, gc_prev, dz.T @ xh, dz.sum(axis=0)

    return make(out, (x, h, c, weight, bias), backward)


def dropout(x, rate, rng: np.random.Generator, training: bool):
    x = as_tensor(x)
    if not training or rate <= 0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return make(x.data * keep, (x,), lambda g: (g * keep,))
