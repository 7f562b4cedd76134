"""Row-wise numeric kernels with a numba path and a pure-numpy fallback.

The numba path is used when numba imports cleanly and the environment
variable ``DEFORMER_DISABLE_NUMBA`` is unset (or ``0``). Both paths take
2-D C-contiguous arrays and operate along the last axis.
"""
import os

import numpy as np

_DISABLED = os.environ.get("DEFORMER_DISABLE_NUMBA", "0") not in ("", "0", "false", "False")

try:
    if _DISABLED:
        raise ImportError("disabled by DEFORMER_DISABLE_NUMBA")
    from numba import njit

    HAVE_NUMBA = True
except ImportError:
    HAVE_NUMBA = False


# ----------------------------------------------------------------------------
# pure numpy
# ----------------------------------------------------------------------------

def np_softmax_rows(x):
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def np_softmax_rows_backward(y, gy):
    return y * (gy - (gy * y).sum(axis=1, keepdims=True))


def np_log_softmax_rows(x):
    shifted = x - x.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def np_logsumexp_rows(x):
    m = x.max(axis=1)
    return m + np.log(np.exp(x - m[:, None]).sum(axis=1))


def np_layer_norm_rows(x, eps):
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    return xc * inv_std, inv_std[:, 0]


def np_layer_norm_rows_backward(xhat, inv_std, gxhat):
    mean_g = gxhat.mean(axis=1, keepdims=True)
    mean_gx = (gxhat * xhat).mean(axis=1, keepdims=True)
    return (gxhat - mean_g - xhat * mean_gx) * inv_std[:, None]


# ----------------------------------------------------------------------------
# numba
# ----------------------------------------------------------------------------

if HAVE_NUMBA:

    @njit(cache=True)
    def nb_softmax_rows(x):
        rows, cols = x.shape
        out = np.empty_like(x)
        for r in range(rows):
            m = x[r, 0]
            for c in range(1, cols):
                if x[r, c] > m:
                    m = x[r, c]
            s = 0.0
            for c in range(cols):
                e = np.exp(x[r, c] - m)
                out[r, c] = e
                s += e
            for c in range(cols):
                out[r, c] /= s
        return out

    @njit(cache=True)
    def nb_softmax_rows_backward(y, gy):
        rows, cols = y.shape
        out = np.empty_like(y)
        for r in range(rows):
            dot = 0.0
            for c in range(cols):
                dot += gy[r, c] * y[r, c]
            for c in range(cols):
                out[r, c] = y[r, c] * (gy[r, c] - dot)
        return out

    @njit(cache=True)
    def nb_log_softmax_rows(x):
        rows, cols = x.shape
        out = np.empty_like(x)
        for r in range(rows):
            m = x[r, 0]
            for c in range(1, cols):
                if x[r, c] > m:
                    m = x[r, c]
            s = 0.0
            for c in range(cols):
                s += np.exp(x[r, c] - m)
            ls = np.log(s)
            for c in range(cols):
                out[r, c] = x[r, c] - m - ls
        return out

    @njit(cache=True)
    def nb_logsumexp_rows(x):
        rows, cols = x.shape
        out = np.empty(rows, dtype=x.dtype)
        for r in range(rows):
            m = x[r, 0]
            for c in range(1, cols):
                if x[r, c] > m:
                    m = x[r, c]
            s = 0.0
            for c in range(cols):
                s += np.exp(x[r, c] - m)
            out[r] = m + np.log(s)
        return out

    @njit(cache=True)
    def nb_layer_norm_rows(x, eps):
        rows, cols = x.shape
        xhat = np.empty_like(x)
        inv_std = np.empty(rows, dtype=x.dtype)
        for r in range(rows):
            mu = 0.0
            for c in range(cols):
                mu += x[r, c]
            mu /= cols
            var = 0.0
            for c in range(cols):
                d = x[r, c] - mu
                var += d * d
            var /= cols
            inv = 1.0 / np.sqrt(var + eps)
            inv_std[r] = inv
            for c in range(cols):
                xhat[r, c] = (x[r, c] - mu) * inv
        return xhat, inv_std

    @njit(cache=True)
    def nb_layer_norm_rows_backward(xhat, inv_std, gxhat):
        rows, cols = xhat.shape
        out = np.empty_like(xhat)
        for r in range(rows):
            mg = 0.0
            mgx = 0.0
            for c in range(cols):
                mg += gxhat[r, c]
                mgx += gxhat[r, c] * xhat[r, c]
            mg /= cols
            mgx /= cols
            for c in range(cols):
                out[r, c] = (gxhat[r, c] - mg - xhat[r, c] * mgx) * inv_std[r]
        return out

    softmax_rows = nb_softmax_rows
    softmax_rows_backward = nb_softmax_rows_backward
    log_softmax_rows = nb_log_softmax_rows
    logsumexp_rows = nb_logsumexp_rows
    layer_norm_rows = nb_layer_norm_rows
    layer_norm_rows_backward = nb_layer_norm_rows_backward
else:
    softmax_rows = np_softmax_rows
    softmax_rows_backward = np_softmax_rows_backward
    log_softmax_rows = np_log_softmax_rows
    logsumexp_rows = np_logsumexp_rows
    layer_norm_rows = np_layer_norm_rows
    layer_norm_rows_backward = np_layer_norm_rows_backward


def backend():
    return "numba" if HAVE_NUMBA else "numpy"
