"""Hot inner loops for convolution and pooling.

Each kernel has a pure-numpy implementation and a numba ``@njit`` twin.
The numba path is used when numba imports cleanly and the environment
variable ``MSILAX_DISABLE_NUMBA`` is unset (or ``0``/``false``).  Both paths
produce the same values; the numpy path is the reference in tests.

Layouts:
    im2col  (N, C, Hp, Wp) padded input -> (N*oh*ow, C*kh*kw)
    col2im  inverse scatter-add of im2col, returns the padded-shape gradient
    maxpool 2x2 stride-2 window, argmax index in 0..3 (row-major in window,
            first maximum wins)
"""
import logging
import os

import numpy as np

logger = logging.getLogger(__name__)


def _env_disabled():
    return os.environ.get("MSILAX_DISABLE_NUMBA", "").strip().lower() in ("1", "true", "yes", "on")


try:
    if _env_disabled():
        raise ImportError("disabled by MSILAX_DISABLE_NUMBA")
    import numba
    from numba import njit

    logging.getLogger("numba").setLevel(logging.WARNING)
    HAVE_NUMBA = True
except ImportError:
    HAVE_NUMBA = False

BACKEND = "numba" if HAVE_NUMBA else "numpy"


def conv_out_size(size, k, stride):
    return (size - k) // stride + 1


# ---------------------------------------------------------------- numpy path

def im2col_numpy(xp, kh, kw, stride):
    n, c, hp, wp = xp.shape
    oh = conv_out_size(hp, kh, stride)
    ow = conv_out_size(wp, kw, stride)
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride][:, :, :oh, :ow]
    # (n, c, oh, ow, kh, kw) -> (n, oh, ow, c, kh, kw)
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * oh * ow, c * kh * kw)


def col2im_numpy(cols, padded_shape, kh, kw, stride):
    n, c, hp, wp = padded_shape
    oh = conv_out_size(hp, kh, stride)
    ow = conv_out_size(wp, kw, stride)
    cols6 = cols.reshape(n, oh, ow, c, kh, kw)
    out = np.zeros(padded_shape, dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += (
                cols6[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            )
    return out


def maxpool2_forward_numpy(x):
    n, c, h, w = x.shape
    win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = np.argmax(win, axis=-1).astype(np.int8)
    out = np.take_along_axis(win, idx[..., None].astype(np.intp), axis=-1)[..., 0]
    return out, idx


def maxpool2_backward_numpy(grad, idx):
    n, c, oh, ow = grad.shape
    onehot = (idx[..., None] == np.arange(4, dtype=np.int8)).astype(grad.dtype)
    g = onehot * grad[..., None]
    g = g.reshape(n, c, oh, ow, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return np.ascontiguousarray(g).reshape(n, c, oh * 2, ow * 2)


# ---------------------------------------------------------------- numba path

if HAVE_NUMBA:

    @njit(cache=True)
    def _im2col_nb(xp, kh, kw, stride, oh, ow):
        n, c, _, _ = xp.shape
        out = np.empty((n * oh * ow, c * kh * kw), dtype=xp.dtype)
        for b in range(n):
            for y in range(oh):
                for x in range(ow):
                    row = (b * oh + y) * ow + x
                    col = 0
                    for ch in range(c):
                        for i in range(kh):
                            for j in range(kw):
                                out[row, col] = xp[b, ch, y * stride + i, x * stride + j]
                                col += 1
        return out

    @njit(cache=True)
    def _col2im_nb(cols, out, kh, kw, stride, oh, ow):
        n, c, _, _ = out.shape
        for b in range(n):
            for y in range(oh):
                for x in range(ow):
                    row = (b * oh + y) * ow + x
                    col = 0
                    for ch in range(c):
                        for i in range(kh):
                            for j in range(kw):
                                out[b, ch, y * stride + i, x * stride + j] += cols[row, col]
                                col += 1
        return out

    @njit(cache=True)
    def _maxpool2_fwd_nb(x):
        n, c, h, w = x.shape
        oh, ow = h // 2, w // 2
        out = np.empty((n, c, oh, ow), dtype=x.dtype)
        idx = np.empty((n, c, oh, ow), dtype=np.int8)
        for b in range(n):
            for ch in range(c):
                for y in range(oh):
                    for xx in range(ow):
                        best = x[b, ch, 2 * y, 2 * xx]
                        k = 0
                        for t in range(1, 4):
                            v = x[b, ch, 2 * y + t // 2, 2 * xx + t % 2]
                            # NaN wins, as with np.argmax
                            if v > best or (v != v and best == best):
                                best = v
                                k = t
                        out[b, ch, y, xx] = best
                        idx[b, ch, y, xx] = k
        return out, idx

    @njit(cache=True)
    def _maxpool2_bwd_nb(grad, idx):
        n, c, oh, ow = grad.shape
        out = np.zeros((n, c, oh * 2, ow * 2), dtype=grad.dtype)
        for b in range(n):
            for ch in range(c):
                for y in range(oh):
                    for xx in range(ow):
                        t = idx[b, ch, y, xx]
                        out[b, ch, 2 * y + t // 2, 2 * xx + t % 2] = grad[b, ch, y, xx]
        return out

    def im2col_numba(xp, kh, kw, stride):
        oh = conv_out_size(xp.shape[2], kh, stride)
        ow = conv_out_size(xp.shape[3], kw, stride)
        return _im2col_nb(np.ascontiguousarray(xp), kh, kw, stride, oh, ow)

    def col2im_numba(cols, padded_shape, kh, kw, stride):
        oh = conv_out_size(padded_shape[2], kh, stride)
        ow = conv_out_size(padded_shape[3], kw, stride)
        out = np.zeros(padded_shape, dtype=cols.dtype)
        return _col2im_nb(np.ascontiguousarray(cols), out, kh, kw, stride, oh, ow)

    def maxpool2_forward_numba(x):
        return _maxpool2_fwd_nb(np.ascontiguousarray(x))

    def maxpool2_backward_numba(grad, idx):
        return _maxpool2_bwd_nb(np.ascontiguousarray(grad), np.ascontiguousarray(idx))


_NUMPY = {
    "im2col": im2col_numpy,
    "col2im": col2im_numpy,
    "maxpool2_forward": maxpool2_forward_numpy,
    "maxpool2_backward": maxpool2_backward_numpy,
}
_NUMBA = (
    {
        "im2col": im2col_numba,
        "col2im": col2im_numba,
        "maxpool2_forward": maxpool2_forward_numba,
        "maxpool2_backward": maxpool2_backward_numba,
    }
    if HAVE_NUMBA
    else None
)


def get_kernels(backend=None):
    """Return the kernel table for ``backend`` ("numpy", "numba" or None=active)."""
    backend = backend or BACKEND
    if backend == "numba":
        if _NUMBA is None:
            raise RuntimeError("numba backend requested but numba is unavailable or disabled")
        return _NUMBA
    if backend == "numpy":
        return _NUMPY
    raise ValueError(f"unknown kernel backend {backend!r}")


_active = get_kernels()


def im2col(xp, kh, kw, stride):
    return _active["im2col"](xp, kh, kw, stride)


def col2im(cols, padded_shape, kh, kw, stride):
    return _active["col2im"](cols, padded_shape, kh, kw, stride)


def maxpool2_forward(x):
    return _active["maxpool2_forward"](x)


def maxpool2_backward(grad, idx):
    return _active["maxpool2_backward"](grad, idx)
