"""Pure-numpy reference kernels.

Same signatures as the compiled ``_ckernels`` module. Every kernel works on
2-D (row-major) views; callers reshape higher-rank tensors first.
"""

import numpy as np

GELU_C = 0.7978845608028654  # sqrt(2 / pi)
GELU_A = 0.044715

BACKEND = "python"


def _sigmoid_bounds(dtype):
    info = np.finfo(dtype)
    return info.tiny, 1.0 - info.epsneg


def sigmoid(x):
    x = np.ascontiguousarray(x)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    lo, hi = _sigmoid_bounds(x.dtype)
    # keep the open interval (0, 1) under saturation
    np.clip(out, lo, hi, out=out)
    return out


def gelu(x):
    inner = GELU_C * (x + GELU_A * x * x * x)
    return 0.5 * x * (1.0 + np.tanh(inner))


def gelu_backward(x, gy):
    t = np.tanh(GELU_C * (x + GELU_A * x * x * x))
    d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
    return gy * d


def softmax_rows(x, mask=None):
    if mask is not None:
        x = np.where(mask.astype(bool), x, -np.inf)
    m = x.max(axis=1, keepdims=True)
    m[~np.isfinite(m)] = 0.0
    e = np.exp(x - m)
    s = e.sum(axis=1, keepdims=True)
    s[s == 0] = 1.0
    return e / s


def softmax_rows_backward(y, gy):
    dot = (gy * y).sum(axis=1, keepdims=True)
    return y * (gy - dot)


def layernorm_rows(x, gamma, beta, eps):
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gamma + beta, xhat, rstd[:, 0]


def layernorm_rows_backward(gy, xhat, rstd, gamma):
    ggamma = (gy * xhat).sum(axis=0)
    gbeta = gy.sum(axis=0)
    gxhat = gy * gamma
    a = gxhat.mean(axis=1, keepdims=True)
    b = (gxhat * xhat).mean(axis=1, keepdims=True)
    gx = rstd[:, None] * (gxhat - a - xhat * b)
    return gx, ggamma, gbeta


def masked_mean(x, valid):
    """Mean of ``x[b, i, :]`` over positions ``i`` with ``valid[b, i] != 0``."""
    w = valid.astype(x.dtype)
    count = w.sum(axis=1)
    total = (x * w[:, :, None]).sum(axis=1)
    return total / count[:, None]


def cross_entropy_rows(logits, targets, weights):
    """Weighted mean negative log-softmax; returns ``(loss, probs)``."""
    m = logits.max(axis=1, keepdims=True)
    z = logits - m
    lse = np.log(np.exp(z).sum(axis=1))
    nll = lse - z[np.arange(len(targets)), targets]
    loss = (nll * weights).sum() / weights.sum()
    probs = np.exp(z - lse[:, None])
    return loss, probs


def scatter_add_rows(ids, g, n_rows):
    out = np.zeros((n_rows, g.shape[1]), dtype=g.dtype)
    np.add.at(out, ids, g)
    return out
