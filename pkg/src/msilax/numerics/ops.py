"""Differentiable operations on :class:`Tensor`.

Each op computes its forward value with numpy and, when any input needs a
gradient, registers a closure returning one gradient per parent (``None``
for parents that do not need one).  Broadcasting in binary ops is limited
to expanding size-1 dimensions (numpy rules, including leading axes).
"""
import numpy as np

from msilax.errors import DataError, DimensionError, ConfigError
from msilax.numerics import kernels
from msilax.numerics.tensor import Tensor, as_tensor


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    if lead:
        grad = grad.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _broadcast_shape(a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"shapes {a.shape} and {b.shape} are not broadcastable") from None


def _pair(a, b):
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


# ------------------------------------------------------------------ binary

def add(a, b):
    a, b = _pair(a, b)
    _broadcast_shape(a, b)

    def backward(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(g, b.shape) if b.requires_grad else None)

    return Tensor._from_op(a.data + b.data, (a, b), backward, "add")


def sub(a, b):
    a, b = _pair(a, b)
    _broadcast_shape(a, b)

    def backward(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(-g, b.shape) if b.requires_grad else None)

    return Tensor._from_op(a.data - b.data, (a, b), backward, "sub")


def mul(a, b):
    a, b = _pair(a, b)
    _broadcast_shape(a, b)

    def backward(g):
        return (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.shape) if b.requires_grad else None)

    return Tensor._from_op(a.data * b.data, (a, b), backward, "mul")


def div(a, b):
    a, b = _pair(a, b)
    _broadcast_shape(a, b)
    out = a.data / b.data

    def backward(g):
        return (_unbroadcast(g / b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None)

    return Tensor._from_op(out, (a, b), backward, "div")


def matmul(a, b):
    a, b = _pair(a, b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")

    def backward(g):
        return (g @ b.data.T if a.requires_grad else None,
                a.data.T @ g if b.requires_grad else None)

    return Tensor._from_op(a.data @ b.data, (a, b), backward, "matmul")


# ------------------------------------------------------------------ unary

def neg(x):
    return Tensor._from_op(-x.data, (x,), lambda g: (-g,), "neg")


def exp(x):
    out = np.exp(x.data)
    return Tensor._from_op(out, (x,), lambda g: (g * out,), "exp")


def log(x):
    return Tensor._from_op(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def relu(x):
    mask = x.data > 0
    # np.maximum keeps NaN visible so divergence is not masked
    return Tensor._from_op(np.maximum(x.data, x.dtype.type(0)), (x,), lambda g: (g * mask,), "relu")


def max_scalar(x, c):
    """Elementwise ``max(x, c)``; gradient passes where ``x > c``."""
    c = x.dtype.type(c)
    mask = x.data > c
    return Tensor._from_op(np.maximum(x.data, c), (x,), lambda g: (g * mask,), "max_scalar")


def _sigmoid(z):
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1 / (1 + e), e / (1 + e)).astype(z.dtype)


def sigmoid(x):
    out = _sigmoid(x.data)
    return Tensor._from_op(out, (x,), lambda g: (g * out * (1 - out),), "sigmoid")


# ------------------------------------------------------------------ reductions / shape

def sum(x, axis=None, keepdims=False):  # noqa: A001
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape),)

    return Tensor._from_op(np.asarray(out, dtype=x.dtype), (x,), backward, "sum")


def mean(x, axis=None, keepdims=False):
    count = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    out = np.mean(x.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / x.dtype.type(count), x.shape),)

    return Tensor._from_op(np.asarray(out, dtype=x.dtype), (x,), backward, "mean")


def reshape(x, shape):
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {x.shape} to {shape}") from None
    return Tensor._from_op(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def flatten(x):
    return reshape(x, (x.shape[0], -1))


# ------------------------------------------------------------------ softmax family

def softmax(x, axis=-1):
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._from_op(out, (x,), backward, "softmax")


def log_softmax(x, axis=-1):
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return Tensor._from_op(out, (x,), backward, "log_softmax")


def cross_entropy(logits, labels):
    """Mean negative log-likelihood of integer ``labels`` under ``logits`` (N, K)."""
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy expects (N,K) logits and (N,) labels, got {logits.shape}, {labels.shape}")
    k = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise DataError(f"label out of range [0, {k})")
    labels = labels.astype(np.intp)
    n = logits.shape[0]
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    loss = -logp[np.arange(n), labels].mean()

    def backward(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1
        return (p * (g / n),)

    return Tensor._from_op(np.asarray(loss, dtype=logits.dtype), (logits,), backward, "cross_entropy")


# ------------------------------------------------------------------ conv / pool / resample

def conv2d(x, w, b=None, stride=1, padding=0):
    """Cross-correlation of x (N,C,H,W) with w (K,C,kh,kw), zero padding."""
    if stride <= 0:
        raise ConfigError(f"stride must be positive, got {stride}")
    if padding < 0:
        raise ConfigError(f"padding must be non-negative, got {padding}")
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input and kernel, got {x.shape}, {w.shape}")
    n, c, h, wd = x.shape
    k, c2, kh, kw = w.shape
    if c != c2:
        raise DimensionError(f"conv2d channel mismatch: input {c}, kernel {c2}")
    if kh > h + 2 * padding or kw > wd + 2 * padding:
        raise DimensionError(f"kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{wd + 2 * padding}")
    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    oh = kernels.conv_out_size(xp.shape[2], kh, stride)
    ow = kernels.conv_out_size(xp.shape[3], kw, stride)
    cols = kernels.im2col(xp, kh, kw, stride)
    wm = w.data.reshape(k, -1)
    out = cols @ wm.T
    if b is not None:
        out += b.data
    out = np.ascontiguousarray(out.reshape(n, oh, ow, k).transpose(0, 3, 1, 2))
    padded_shape = xp.shape
    keep_cols = cols if w.requires_grad else None
    del cols

    def backward(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, k)
        gx = gw = gb = None
        if w.requires_grad:
            gw = (gm.T @ keep_cols).reshape(w.shape)
        if b is not None and b.requires_grad:
            gb = gm.sum(axis=0)
        if x.requires_grad:
            dxp = kernels.col2im(gm @ wm, padded_shape, kh, kw, stride)
            gx = dxp[:, :, padding:padding + h, padding:padding + wd] if padding else dxp
        return (gx, gw) if b is None else (gx, gw, gb)

    parents = (x, w) if b is None else (x, w, b)
    return Tensor._from_op(out, parents, backward, "conv2d")


def max_pool2d(x):
    """2x2 max pooling with stride 2; spatial dims must be even."""
    if x.ndim != 4 or x.shape[2] % 2 or x.shape[3] % 2:
        raise DimensionError(f"max_pool2d needs (N,C,H,W) with even H,W, got {x.shape}")
    out, idx = kernels.maxpool2_forward(x.data)
    return Tensor._from_op(out, (x,), lambda g: (kernels.maxpool2_backward(g, idx),), "max_pool2d")


def bilinear_matrix(src, dst, dtype=np.float32):
    """(dst, src) interpolation matrix with half-pixel centres, edge clamped.

    Each row is a convex combination, so resampled values stay within the
    input range.
    """
    m = np.zeros((dst, src), dtype=np.float64)
    scale = src / dst
    for i in range(dst):
        pos = min(max((i + 0.5) * scale - 0.5, 0.0), src - 1.0)
        lo = int(np.floor(pos))
        hi = min(lo + 1, src - 1)
        frac = pos - lo
        m[i, lo] += 1.0 - frac
        m[i, hi] += frac
    return m.astype(dtype)


def upsample_bilinear(x, size):
    """Resize the last two axes of ``x`` to ``size`` = (H, W)."""
    h, w = x.shape[-2:]
    ay = bilinear_matrix(h, size[0], x.dtype)
    ax = bilinear_matrix(w, size[1], x.dtype)
    out = ay @ x.data @ ax.T
    return Tensor._from_op(out, (x,), lambda g: (ay.T @ g @ ax,), "upsample_bilinear")
