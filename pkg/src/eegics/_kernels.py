"""Time-axis kernels for the convolution layers.

Arrays use the engine's internal layout ``(rows, time, features)``, where
``rows`` folds the batch and EEG-channel axes together, so no kernel can mix
EEG channels.

Two interchangeable backends expose the same functions.  The numba backend
compiles the im2col/col2im scatter loops and the depthwise loops with
``@njit``; dense products always go through BLAS via ``@``.  The pure numpy
backend builds the same matrices with strided views.  Set
``EEGICS_DISABLE_NUMBA=1`` to force numpy.  Backends agree to rounding, not
bit-for-bit, so determinism guarantees hold per backend.
"""

import os

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def same_pad(k):
    """(left, right) zero padding keeping the time extent for kernel length k."""
    left = (k - 1) // 2
    return left, k - 1 - left


def _pad_time(x, k):
    left, right = same_pad(k)
    if k == 1:
        return x
    return np.pad(x, ((0, 0), (left, right), (0, 0)))


def flatten_weight(w):
    """(Fo, Fi, k) conv weight -> (k*Fi, Fo) matrix matching the im2col columns."""
    fo, fi, k = w.shape
    return np.ascontiguousarray(w.transpose(2, 1, 0).reshape(k * fi, fo))


def unflatten_weight(w2, fo, fi, k):
    return np.ascontiguousarray(w2.reshape(k, fi, fo).transpose(2, 1, 0))


# numpy backend


def _np_im2col(x, k):
    n, t, fi = x.shape
    win = sliding_window_view(_pad_time(x, k), k, axis=1)  # (n, t, fi, k)
    return np.ascontiguousarray(win.transpose(0, 1, 3, 2)).reshape(n * t, k * fi)


def _np_col2im(dcol, k, shape):
    n, t, fi = shape
    left, _ = same_pad(k)
    d = dcol.reshape(n, t, k, fi)
    dxp = np.zeros((n, t + k - 1, fi), dtype=dcol.dtype)
    for j in range(k):
        dxp[:, j:j + t, :] += d[:, :, j, :]
    return dxp[:, left:left + t, :]


def _np_depthwise_forward(x, w, b):
    # x (N, T, F); w (F, k); b (F,)
    t = x.shape[1]
    k = w.shape[1]
    xp = _pad_time(x, k)
    out = np.empty_like(x)
    out[...] = b
    for j in range(k):
        out += xp[:, j:j + t, :] * w[:, j]
    return out


def _np_depthwise_backward(x, w, dy, need_dx=True):
    t = x.shape[1]
    k = w.shape[1]
    xp = _pad_time(x, k)
    dw = np.empty_like(w)
    for j in range(k):
        dw[:, j] = np.einsum("ntf,ntf->f", xp[:, j:j + t, :], dy)
    db = dy.sum(axis=(0, 1))
    if not need_dx:
        return None, dw, db
    left, _ = same_pad(k)
    dxp = np.zeros_like(xp)
    for j in range(k):
        dxp[:, j:j + t, :] += dy * w[:, j]
    return dxp[:, left:left + t, :], dw, db


# numba backend


def _build_numba():
    from numba import njit

    @njit(cache=True)
    def im2col(x, k, left, col):
        n, t, fi = x.shape
        for r in range(n):
            for s in range(t):
                row = col[r * t + s]
                for j in range(k):
                    src = s + j - left
                    base = j * fi
                    if src < 0 or src >= t:
                        for i in range(fi):
                            row[base + i] = 0
                    else:
                        xs = x[r, src]
                        for i in range(fi):
                            row[base + i] = xs[i]

    @njit(cache=True)
    def col2im(dcol, k, left, dx):
        n, t, fi = dx.shape
        dx[...] = 0
        for r in range(n):
            for s in range(t):
                row = dcol[r * t + s]
                for j in range(k):
                    dst = s + j - left
                    if 0 <= dst < t:
                        d = dx[r, dst]
                        base = j * fi
                        for i in range(fi):
                            d[i] += row[base + i]

    @njit(cache=True)
    def depthwise_forward(x, wt, b, left, out):
        # wt (k, F)
        n, t, f = x.shape
        k = wt.shape[0]
        for r in range(n):
            for s in range(t):
                o = out[r, s]
                for q in range(f):
                    o[q] = b[q]
                for j in range(k):
                    src = s + j - left
                    if 0 <= src < t:
                        xs = x[r, src]
                        wj = wt[j]
                        for q in range(f):
                            o[q] += xs[q] * wj[q]

    @njit(cache=True)
    def depthwise_backward(x, wt, dy, left, dwt, dx, need_dx):
        n, t, f = dy.shape
        k = wt.shape[0]
        dwt[...] = 0
        if need_dx:
            dx[...] = 0
        for r in range(n):
            for s in range(t):
                g = dy[r, s]
                for j in range(k):
                    src = s + j - left
                    if 0 <= src < t:
                        xs = x[r, src]
                        dwj = dwt[j]
                        for q in range(f):
                            dwj[q] += xs[q] * g[q]
                        if need_dx:
                            d = dx[r, src]
                            wj = wt[j]
                            for q in range(f):
                                d[q] += g[q] * wj[q]

    @njit(cache=True)
    def relu_grad(d, out):
        # d *= (out > 0), in place
        fd = d.reshape(-1)
        fo = out.reshape(-1)
        for i in range(fd.size):
            if not fo[i] > 0:
                fd[i] = 0

    @njit(cache=True)
    def pool_forward(x, p, out):
        n, t, f = out.shape
        scale = x.dtype.type(1.0) / p
        for r in range(n):
            for s in range(t):
                o = out[r, s]
                for q in range(f):
                    o[q] = 0
                for j in range(p):
                    xs = x[r, s * p + j]
                    for q in range(f):
                        o[q] += xs[q]
                for q in range(f):
                    o[q] *= scale

    @njit(cache=True)
    def pool_backward(d, p, dx):
        n, t, f = d.shape
        scale = d.dtype.type(1.0) / p
        for r in range(n):
            for s in range(t):
                g = d[r, s]
                for j in range(p):
                    o = dx[r, s * p + j]
                    for q in range(f):
                        o[q] = g[q] * scale

    return (im2col, col2im, depthwise_forward, depthwise_backward, relu_grad,
            pool_forward, pool_backward)


_NB = None


def numba_available():
    global _NB
    if _NB is None:
        try:
            _NB = _build_numba()
        except ImportError:
            _NB = False
    return _NB is not False


def _nb_im2col(x, k):
    n, t, fi = x.shape
    if fi == 1:
        # a single input map is one strided copy; the view is faster than the loop
        return _np_im2col(x, k)
    x = np.ascontiguousarray(x)
    col = np.empty((n * t, k * fi), dtype=x.dtype)
    _NB[0](x, k, same_pad(k)[0], col)
    return col


def _nb_col2im(dcol, k, shape):
    dx = np.empty(shape, dtype=dcol.dtype)
    _NB[1](np.ascontiguousarray(dcol), k, same_pad(k)[0], dx)
    return dx


def _nb_depthwise_forward(x, w, b):
    x = np.ascontiguousarray(x)
    out = np.empty_like(x)
    _NB[2](x, np.ascontiguousarray(w.T), b.astype(x.dtype), same_pad(w.shape[1])[0], out)
    return out


def _nb_depthwise_backward(x, w, dy, need_dx=True):
    x = np.ascontiguousarray(x)
    k = w.shape[1]
    dwt = np.empty((k, w.shape[0]), dtype=x.dtype)
    dx = np.empty_like(x) if need_dx else np.empty((1, 1, w.shape[0]), dtype=x.dtype)
    _NB[3](x, np.ascontiguousarray(w.T), np.ascontiguousarray(dy), same_pad(k)[0],
           dwt, dx, need_dx)
    db = dy.sum(axis=(0, 1))
    return (dx if need_dx else None), np.ascontiguousarray(dwt.T), db


def _nb_relu_grad(d, out):
    d = np.ascontiguousarray(d)
    _NB[4](d, np.ascontiguousarray(out))
    return d


def _nb_pool_forward(x, p):
    n, t, f = x.shape
    out = np.empty((n, t // p, f), dtype=x.dtype)
    _NB[5](np.ascontiguousarray(x), p, out)
    return out


def _nb_pool_backward(d, p):
    n, t, f = d.shape
    dx = np.empty((n, t * p, f), dtype=d.dtype)
    _NB[6](np.ascontiguousarray(d), p, dx)
    return dx


def _np_relu_grad(d, out):
    d = np.ascontiguousarray(d)
    d[~(out > 0)] = 0
    return d


def _np_pool_forward(x, p):
    out = x[:, 0::p, :].copy()
    for j in range(1, p):
        out += x[:, j::p, :]
    out *= x.dtype.type(1.0 / p)
    return out


def _np_pool_backward(d, p):
    return np.repeat(d * d.dtype.type(1.0 / p), p, axis=1)


class Kernels:
    """Bundle of backend-specific primitives."""

    def __init__(self, name, im2col, col2im, depthwise_forward, depthwise_backward,
                 relu_grad, pool_forward, pool_backward):
        self.name = name
        self.im2col = im2col
        self.col2im = col2im
        self.depthwise_forward = depthwise_forward
        self.depthwise_backward = depthwise_backward
        self.relu_grad = relu_grad
        self.pool_forward = pool_forward
        self.pool_backward = pool_backward

    def __repr__(self):
        return f"Kernels({self.name!r})"


NUMPY = Kernels("numpy", _np_im2col, _np_col2im, _np_depthwise_forward,
                _np_depthwise_backward, _np_relu_grad, _np_pool_forward, _np_pool_backward)
NUMBA = Kernels("numba", _nb_im2col, _nb_col2im, _nb_depthwise_forward,
                _nb_depthwise_backward, _nb_relu_grad, _nb_pool_forward, _nb_pool_backward)


def _default_backend():
    if os.environ.get("EEGICS_DISABLE_NUMBA", "0").strip() not in ("", "0"):
        return "numpy"
    return "numba" if numba_available() else "numpy"


BACKEND = _default_backend()


def get_kernels(backend=None):
    backend = backend or BACKEND
    if backend == "numba":
        if not numba_available():
            raise RuntimeError("numba backend requested but numba is not importable")
        return NUMBA
    if backend == "numpy":
        return NUMPY
    raise ValueError(f"unknown kernel backend {backend!r}")
