# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled row kernels, drop-in for ``_kernels_py``.

Reductions run strictly left to right over the reduced axis.
"""

import numpy as np

from cython cimport floating
from libc.math cimport exp, log, sqrt, tanh, INFINITY
from libc.stdint cimport int64_t

BACKEND = "cython"

cdef double GELU_C = 0.7978845608028654
cdef double GELU_A = 0.044715


def sigmoid(x):
    x = np.ascontiguousarray(x)
    out = np.empty_like(x)
    info = np.finfo(x.dtype)
    _sigmoid_flat(x.reshape(-1), out.reshape(-1), info.tiny, 1.0 - info.epsneg)
    return out


def _sigmoid_flat(floating[::1] x, floating[::1] out, double lo, double hi):
    cdef Py_ssize_t i
    cdef double v, e, y
    for i in range(x.shape[0]):
        v = x[i]
        if v >= 0:
            y = 1.0 / (1.0 + exp(-v))
        else:
            e = exp(v)
            y = e / (1.0 + e)
        if y < lo:
            y = lo
        elif y > hi:
            y = hi
        out[i] = <floating>y


def gelu(x):
    x = np.ascontiguousarray(x)
    out = np.empty_like(x)
    _gelu_flat(x.reshape(-1), out.reshape(-1))
    return out


def _gelu_flat(floating[::1] x, floating[::1] out):
    cdef Py_ssize_t i
    cdef double v
    for i in range(x.shape[0]):
        v = x[i]
        out[i] = <floating>(0.5 * v * (1.0 + tanh(GELU_C * (v + GELU_A * v * v * v))))


def gelu_backward(x, gy):
    x = np.ascontiguousarray(x)
    gy = np.ascontiguousarray(gy, dtype=x.dtype)
    out = np.empty_like(x)
    _gelu_bwd_flat(x.reshape(-1), gy.reshape(-1), out.reshape(-1))
    return out


def _gelu_bwd_flat(floating[::1] x, floating[::1] gy, floating[::1] out):
    cdef Py_ssize_t i
    cdef double v, t, d
    for i in range(x.shape[0]):
        v = x[i]
        t = tanh(GELU_C * (v + GELU_A * v * v * v))
        d = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * v * v)
        out[i] = <floating>(gy[i] * d)


def softmax_rows(x, mask=None):
    x = np.ascontiguousarray(x)
    out = np.empty_like(x)
    if mask is None:
        mask = np.ones(x.shape, dtype=np.uint8)
    else:
        mask = np.ascontiguousarray(mask, dtype=np.uint8)
    _softmax(x, mask, out)
    return out


def _softmax(floating[:, ::1] x, const unsigned char[:, ::1] mask,
        floating[:, ::1] out):
    cdef Py_ssize_t r, t
    cdef Py_ssize_t n = x.shape[1]
    cdef double m, s, e
    for r in range(x.shape[0]):
        m = -INFINITY
        for t in range(n):
            if mask[r, t] and x[r, t] > m:
                m = x[r, t]
        s = 0.0
        for t in range(n):
            if mask[r, t]:
                e = exp(x[r, t] - m)
                out[r, t] = <floating>e
                s += <floating>e
            else:
                out[r, t] = 0
        if s == 0.0:
            continue
        for t in range(n):
            out[r, t] = <floating>(out[r, t] / s)


def softmax_rows_backward(y, gy):
    y = np.ascontiguousarray(y)
    gy = np.ascontiguousarray(gy, dtype=y.dtype)
    out = np.empty_like(y)
    _softmax_bwd(y, gy, out)
    return out


def _softmax_bwd(floating[:, ::1] y, floating[:, ::1] gy, floating[:, ::1] out):
    cdef Py_ssize_t r, t
    cdef double dot
    for r in range(y.shape[0]):
        dot = 0.0
        for t in range(y.shape[1]):
            dot += gy[r, t] * y[r, t]
        for t in range(y.shape[1]):
            out[r, t] = <floating>(y[r, t] * (gy[r, t] - dot))


def layernorm_rows(x, gamma, beta, double eps):
    x = np.ascontiguousarray(x)
    gamma = np.ascontiguousarray(gamma, dtype=x.dtype)
    beta = np.ascontiguousarray(beta, dtype=x.dtype)
    y = np.empty_like(x)
    xhat = np.empty_like(x)
    rstd = np.empty(x.shape[0], dtype=x.dtype)
    _layernorm(x, gamma, beta, eps, y, xhat, rstd)
    return y, xhat, rstd


def _layernorm(floating[:, ::1] x, floating[::1] gamma, floating[::1] beta, double eps,
        floating[:, ::1] y, floating[:, ::1] xhat, floating[::1] rstd):
    cdef Py_ssize_t r, j
    cdef Py_ssize_t d = x.shape[1]
    cdef double mu, var, c, rs
    for r in range(x.shape[0]):
        mu = 0.0
        for j in range(d):
            mu += x[r, j]
        mu /= d
        var = 0.0
        for j in range(d):
            c = x[r, j] - mu
            var += c * c
        var /= d
        rs = 1.0 / sqrt(var + eps)
        rstd[r] = <floating>rs
        for j in range(d):
            c = (x[r, j] - mu) * rs
            xhat[r, j] = <floating>c
            y[r, j] = <floating>(c * gamma[j] + beta[j])


def layernorm_rows_backward(gy, xhat, rstd, gamma):
    xhat = np.ascontiguousarray(xhat)
    gy = np.ascontiguousarray(gy, dtype=xhat.dtype)
    rstd = np.ascontiguousarray(rstd, dtype=xhat.dtype)
    gamma = np.ascontiguousarray(gamma, dtype=xhat.dtype)
    gx = np.empty_like(xhat)
    ggamma = np.zeros(xhat.shape[1], dtype=xhat.dtype)
    gbeta = np.zeros(xhat.shape[1], dtype=xhat.dtype)
    _layernorm_bwd(gy, xhat, rstd, gamma, gx, ggamma, gbeta)
    return gx, ggamma, gbeta


def _layernorm_bwd(floating[:, ::1] gy, floating[:, ::1] xhat, floating[::1] rstd,
        floating[::1] gamma, floating[:, ::1] gx, floating[::1] ggamma,
        floating[::1] gbeta):
    cdef Py_ssize_t r, j
    cdef Py_ssize_t d = xhat.shape[1]
    cdef double a, b, g
    for r in range(xhat.shape[0]):
        a = 0.0
        b = 0.0
        for j in range(d):
            g = gy[r, j] * gamma[j]
            a += g
            b += g * xhat[r, j]
            ggamma[j] += gy[r, j] * xhat[r, j]
            gbeta[j] += gy[r, j]
        a /= d
        b /= d
        for j in range(d):
            gx[r, j] = <floating>(rstd[r] * (gy[r, j] * gamma[j] - a - xhat[r, j] * b))


def masked_mean(x, valid):
    x = np.ascontiguousarray(x)
    valid = np.ascontiguousarray(valid, dtype=np.uint8)
    out = np.zeros((x.shape[0], x.shape[2]), dtype=x.dtype)
    _masked_mean(x, valid, out)
    return out


def _masked_mean(floating[:, :, ::1] x, const unsigned char[:, ::1] valid,
        floating[:, ::1] out):
    cdef Py_ssize_t b, i, j
    cdef Py_ssize_t count
    for b in range(x.shape[0]):
        count = 0
        for i in range(x.shape[1]):
            if valid[b, i]:
                count += 1
                for j in range(x.shape[2]):
                    out[b, j] += x[b, i, j]
        if count == 0:
            continue
        for j in range(x.shape[2]):
            out[b, j] = <floating>(out[b, j] / count)


def cross_entropy_rows(logits, targets, weights):
    logits = np.ascontiguousarray(logits)
    targets = np.ascontiguousarray(targets, dtype=np.int64)
    weights = np.ascontiguousarray(weights, dtype=logits.dtype)
    probs = np.empty_like(logits)
    loss = _cross_entropy(logits, targets, weights, probs)
    return loss, probs


def _cross_entropy(floating[:, ::1] z, const int64_t[::1] targets, floating[::1] w,
                           floating[:, ::1] probs):
    cdef Py_ssize_t r, v
    cdef double m, s, lse, total = 0.0, wsum = 0.0
    for r in range(z.shape[0]):
        m = z[r, 0]
        for v in range(1, z.shape[1]):
            if z[r, v] > m:
                m = z[r, v]
        s = 0.0
        for v in range(z.shape[1]):
            s += exp(z[r, v] - m)
        lse = log(s)
        for v in range(z.shape[1]):
            probs[r, v] = <floating>exp(z[r, v] - m - lse)
        total += w[r] * (lse - (z[r, targets[r]] - m))
        wsum += w[r]
    return total / wsum


def scatter_add_rows(ids, g, Py_ssize_t n_rows):
    g = np.ascontiguousarray(g)
    ids = np.ascontiguousarray(ids, dtype=np.int64)
    out = np.zeros((n_rows, g.shape[1]), dtype=g.dtype)
    _scatter_add(ids, g, out)
    return out


def _scatter_add(const int64_t[::1] ids, floating[:, ::1] g, floating[:, ::1] out):
    cdef Py_ssize_t k, j
    cdef int64_t row
    for k in range(ids.shape[0]):
        row = ids[k]
        for j in range(g.shape[1]):
            out[row, j] += g[k, j]
