"""Differentiable primitives.

No broadcasting: elementwise ops require equal shapes.  The few places that
combine a shared operand with a batch (bias add, batched matmul against a
matrix, batch expansion, row scaling) are separate, explicit ops.
"""

import numpy as np

from ..errors import (
    BoundsError,
    DegenerateInstanceError,
    DegenerateObjectiveError,
    DimensionError,
    VocabularyError,
)
from . import kernels
from .tensor import Tensor, make_result


def _t(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _same_shape(name, a, b):
    if a.shape != b.shape:
        raise DimensionError(f"{name}: shapes {a.shape} and {b.shape} differ")


def add(a, b):
    a, b = _t(a), _t(b)
    _same_shape("add", a, b)
    return make_result(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b):
    a, b = _t(a), _t(b)
    _same_shape("sub", a, b)
    return make_result(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b):
    a, b = _t(a), _t(b)
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return make_result(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(x, c):
    c = float(c)
    return make_result(x.data * c, (x,), lambda g: (g * c,))


def add_bias(x, b):
    """``x[..., j] + b[j]`` for a rank-1 ``b``."""
    if b.ndim != 1 or b.shape[0] != x.shape[-1]:
        raise DimensionError(f"add_bias: bias {b.shape} does not match last axis of {x.shape}")
    width = b.shape[0]
    return make_result(
        x.data + b.data, (x, b), lambda g: (g, g.reshape(-1, width).sum(axis=0))
    )


def _forward_product(ad, bd):
    if ad.dtype in (np.float32, np.float64):
        return ad @ bd
    # extended precision has no BLAS path; np.dot is the faster generic loop
    if ad.ndim == 2 or bd.ndim == 2:
        return np.dot(ad, bd)
    out = np.empty((ad.shape[0], ad.shape[1], bd.shape[2]), dtype=np.result_type(ad, bd))
    for i in range(ad.shape[0]):
        out[i] = np.dot(ad[i], bd[i])
    return out


def matmul(a, b):
    """Matrix product for ``(m,k)@(k,p)``, ``(B,m,k)@(B,k,p)`` or ``(B,m,k)@(k,p)``."""
    ad, bd = a.data, b.data
    ok = ad.ndim in (2, 3) and bd.ndim in (2, 3) and ad.shape[-1] == bd.shape[-2]
    if ok and bd.ndim == 3:
        ok = ad.ndim == 3 and ad.shape[0] == bd.shape[0]
    if not ok:
        raise DimensionError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    out = _forward_product(ad, bd)

    if ad.ndim == 2:
        def vjp(g):
            return g @ bd.T, ad.T @ g
    elif bd.ndim == 3:
        def vjp(g):
            return g @ bd.transpose(0, 2, 1), ad.transpose(0, 2, 1) @ g
    else:
        rows = ad.shape[0] * ad.shape[1]
        k, p = bd.shape

        def vjp(g):
            return g @ bd.T, ad.reshape(rows, k).T @ g.reshape(rows, p)

    return make_result(out, (a, b), vjp)


def transpose(x, axes=None):
    """Permute axes; default swaps the last two."""
    if axes is None:
        axes = tuple(range(x.ndim - 2)) + (x.ndim - 1, x.ndim - 2)
    inverse = tuple(np.argsort(axes))
    return make_result(
        np.ascontiguousarray(x.data.transpose(axes)), (x,), lambda g: (g.transpose(inverse),)
    )


def reshape(x, shape):
    old = x.shape
    return make_result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def sum(x):
    shape, dtype = x.shape, x.dtype
    return make_result(
        np.asarray(x.data.sum(), dtype=dtype), (x,), lambda g: (np.full(shape, g, dtype=dtype),)
    )


def mean(x):
    n = x.size
    shape, dtype = x.shape, x.dtype
    return make_result(
        np.asarray(x.data.sum() / n, dtype=dtype),
        (x,),
        lambda g: (np.full(shape, g / n, dtype=dtype),),
    )


def sigmoid(x):
    """Numerically stable logistic function; outputs stay inside (0, 1)."""
    y = kernels.impl.sigmoid(x.data)
    return make_result(y, (x,), lambda g: (g * y * (1.0 - y),))


def gelu(x):
    xd = x.data
    return make_result(kernels.impl.gelu(xd), (x,), lambda g: (kernels.impl.gelu_backward(xd, g),))


def softmax(x, mask=None):
    """Softmax over the last axis; positions where ``mask`` is False get 0."""
    shape = x.shape
    width = shape[-1]
    m = None if mask is None else np.asarray(mask, dtype=np.uint8).reshape(-1, width)
    y = kernels.impl.softmax_rows(x.data.reshape(-1, width), m)

    def vjp(g):
        return (kernels.impl.softmax_rows_backward(y, g.reshape(-1, width)).reshape(shape),)

    return make_result(y.reshape(shape), (x,), vjp)


def layer_norm(x, gamma, beta, eps=1e-5):
    shape = x.shape
    width = shape[-1]
    if gamma.shape != (width,) or beta.shape != (width,):
        raise DimensionError(f"layer_norm: gain {gamma.shape}/bias {beta.shape} vs input {shape}")
    y, xhat, rstd = kernels.impl.layernorm_rows(x.data.reshape(-1, width), gamma.data, beta.data, eps)
    gd = gamma.data

    def vjp(g):
        gx, ggamma, gbeta = kernels.impl.layernorm_rows_backward(g.reshape(-1, width), xhat, rstd, gd)
        return gx.reshape(shape), ggamma, gbeta

    return make_result(y.reshape(shape), (x, gamma, beta), vjp)


def concat(tensors, axis=0):
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: incompatible shapes {[t.shape for t in tensors]}") from exc
    bounds = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(
            np.take(g, np.arange(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:])
        )

    return make_result(out, tuple(tensors), vjp)


def narrow(x, axis, start, stop):
    """Slice ``[start:stop]`` along one axis."""
    if not 0 <= start <= stop <= x.shape[axis]:
        raise BoundsError(f"narrow: [{start}:{stop}] outside axis {axis} of {x.shape}")
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)
    shape, dtype = x.shape, x.dtype

    def vjp(g):
        full = np.zeros(shape, dtype=dtype)
        full[index] = g
        return (full,)

    return make_result(np.ascontiguousarray(x.data[index]), (x,), vjp)


def split_heads(x, n_heads):
    """``(B, T, H*d) -> (B*H, T, d)``."""
    b, t, width = x.shape
    if width % n_heads:
        raise DimensionError(f"split_heads: width {width} not divisible by {n_heads} heads")
    d = width // n_heads
    out = x.data.reshape(b, t, n_heads, d).transpose(0, 2, 1, 3).reshape(b * n_heads, t, d)

    def vjp(g):
        return (g.reshape(b, n_heads, t, d).transpose(0, 2, 1, 3).reshape(b, t, width),)

    return make_result(np.ascontiguousarray(out), (x,), vjp)


def merge_heads(x, n_heads):
    """``(B*H, T, d) -> (B, T, H*d)``; inverse of :func:`split_heads`."""
    bh, t, d = x.shape
    b = bh // n_heads
    out = x.data.reshape(b, n_heads, t, d).transpose(0, 2, 1, 3).reshape(b, t, n_heads * d)

    def vjp(g):
        return (g.reshape(b, t, n_heads, d).transpose(0, 2, 1, 3).reshape(bh, t, d),)

    return make_result(np.ascontiguousarray(out), (x,), vjp)


def expand_batch(x, batch):
    """Repeat ``x`` along a new leading batch axis."""
    out = np.broadcast_to(x.data, (batch,) + x.shape).copy()
    return make_result(out, (x,), lambda g: (g.sum(axis=0),))


def embedding(table, ids):
    """Row lookup ``table[ids]`` for an integer array of rank 1 or 2."""
    ids = np.asarray(ids, dtype=np.int64)
    n_rows = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n_rows):
        bad = ids[(ids < 0) | (ids >= n_rows)][0]
        raise VocabularyError(f"token id {int(bad)} outside vocabulary of size {n_rows}")
    width = table.shape[1]
    flat = ids.reshape(-1)

    def vjp(g):
        return (kernels.impl.scatter_add_rows(flat, g.reshape(-1, width), n_rows),)

    return make_result(table.data[ids], (table,), vjp)


def gather_positions(x, positions, batch_index=None):
    """Rows ``x[positions]`` (rank 2) or ``x[batch_index, positions]`` (rank 3)."""
    pos = np.asarray(positions, dtype=np.int64).reshape(-1)
    seq = x.shape[-2]
    if pos.size and (pos.min() < 0 or pos.max() >= seq):
        raise BoundsError(f"position index outside sequence of length {seq}: {pos.tolist()}")
    shape, dtype = x.shape, x.dtype
    if x.ndim == 2:
        index = (pos,)
    elif x.ndim == 3:
        bidx = np.arange(len(pos)) if batch_index is None else np.asarray(batch_index, dtype=np.int64)
        if bidx.shape != pos.shape or (bidx.size and (bidx.min() < 0 or bidx.max() >= shape[0])):
            raise BoundsError(f"batch index {bidx.tolist()} invalid for batch of {shape[0]}")
        index = (bidx, pos)
    else:
        raise DimensionError(f"gather_positions: need rank 2 or 3, got {x.shape}")

    def vjp(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, index, g)
        return (full,)

    return make_result(x.data[index], (x,), vjp)


def take_columns(x, columns):
    """Columns ``x[:, columns]`` of a rank-2 tensor."""
    cols = np.asarray(columns, dtype=np.int64)
    if x.ndim != 2:
        raise DimensionError(f"take_columns: need rank 2, got {x.shape}")
    if cols.size and (cols.min() < 0 or cols.max() >= x.shape[1]):
        raise BoundsError(f"column index outside width {x.shape[1]}: {cols.tolist()}")
    shape, dtype = x.shape, x.dtype

    def vjp(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, (slice(None), cols), g)
        return (full,)

    return make_result(x.data[:, cols], (x,), vjp)


def masked_mean(x, valid):
    """Mean over axis 1 of ``x (B, n, k)`` restricted to ``valid[b, i]``."""
    valid = np.asarray(valid, dtype=bool)
    if x.ndim != 3 or valid.shape != x.shape[:2]:
        raise DimensionError(f"masked_mean: validity {valid.shape} does not match {x.shape}")
    count = valid.sum(axis=1)
    if (count == 0).any():
        raise DegenerateInstanceError(
            f"instance {int(np.argmax(count == 0))} has no valid tokens to average"
        )
    out = kernels.impl.masked_mean(x.data, valid.view(np.uint8))
    w = valid.astype(x.dtype) / count[:, None].astype(x.dtype)

    def vjp(g):
        return (w[:, :, None] * g[:, None, :],)

    return make_result(out, (x,), vjp)


def row_scale(p, s):
    """Scale row ``j`` of ``p (l, d)`` by ``s[..., j]``.

    ``s`` of shape ``(l,)`` gives ``(l, d)``; ``s`` of shape ``(B, l)`` gives
    one scaled copy per batch element, ``(B, l, d)``.
    """
    if p.ndim != 2 or s.ndim not in (1, 2) or s.shape[-1] != p.shape[0]:
        raise DimensionError(f"row_scale: scores {s.shape} do not match rows of {p.shape}")
    pd, sd = p.data, s.data
    if s.ndim == 1:
        out = sd[:, None] * pd

        def vjp(g):
            return sd[:, None] * g, (g * pd).sum(axis=1)
    else:
        out = sd[:, :, None] * pd[None, :, :]

        def vjp(g):
            return (sd[:, :, None] * g).sum(axis=0), (g * pd[None, :, :]).sum(axis=2)

    return make_result(out, (p, s), vjp)


def softmax_cross_entropy(logits, targets, mask=None):
    """Weighted mean of ``-log softmax(logits)[r, targets[r]]`` over rows."""
    if logits.ndim != 2:
        raise DimensionError(f"softmax_cross_entropy: need (n, V) logits, got {logits.shape}")
    n, vocab = logits.shape
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    if targets.shape != (n,):
        raise DimensionError(f"softmax_cross_entropy: {targets.shape[0]} targets for {n} rows")
    if n and (targets.min() < 0 or targets.max() >= vocab):
        raise VocabularyError(f"target id outside [0, {vocab}): {targets.tolist()}")
    weights = np.ones(n, dtype=logits.dtype) if mask is None else np.asarray(mask, dtype=logits.dtype)
    if weights.shape != (n,) or (weights < 0).any():
        raise DimensionError("softmax_cross_entropy: mask must be n non-negative weights")
    total = weights.sum()
    if not total > 0:
        raise DegenerateObjectiveError("softmax_cross_entropy: mask has no positive weight")
    loss, probs = kernels.impl.cross_entropy_rows(logits.data, targets, weights)
    coef = (weights / total)[:, None]
    rows = np.arange(n)

    def vjp(g):
        d = probs.copy()
        d[rows, targets] -= 1.0
        return (g * coef * d,)

    return make_result(np.asarray(loss, dtype=logits.dtype), (logits,), vjp)
