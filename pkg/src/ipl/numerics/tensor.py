"""Dense tensors and a recording tape for reverse-mode differentiation.

Operations executed while a :class:`Tape` is active are appended to it in
execution order, so the node list is already topologically sorted.  Outside
a tape nothing is recorded and ops cost only their numpy work.

    >>> w = Tensor([1.0, 2.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = (w * w).sum()
    >>> backward(tape, loss)[w]
    array([2., 4.])
"""

import numpy as np

from ..errors import ContractError, DimensionError

MAX_RANK = 3
# longdouble is only used by the extended-precision finite-difference oracle
FLOAT_DTYPES = (np.float32, np.float64, np.longdouble)
_ACTIVE = []


def _as_float_array(data, dtype):
    if isinstance(data, Tensor):
        data = data.data
    if dtype is None:
        if isinstance(data, np.ndarray) and data.dtype in FLOAT_DTYPES:
            dtype = data.dtype
        else:
            dtype = np.float64
    return np.array(data, dtype=dtype)


class Tensor:
    """Immutable-by-convention wrapper around a float ndarray of rank <= 3.

    Ops never modify their inputs.  Parameters are updated by rebinding
    ``data`` (see the optimizer), never by writing into it.
    """

    __slots__ = ("data", "requires_grad", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        arr = _as_float_array(data, dtype)
        if arr.ndim > MAX_RANK:
            raise DimensionError(f"rank {arr.ndim} exceeds the maximum rank {MAX_RANK}")
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @classmethod
    def _wrap(cls, arr):
        out = cls.__new__(cls)
        if arr.ndim > MAX_RANK:
            raise DimensionError(f"rank {arr.ndim} exceeds the maximum rank {MAX_RANK}")
        out.data = arr
        out.requires_grad = False
        out.name = None
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def __repr__(self):
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"

    def __len__(self):
        return self.shape[0]

    # operator sugar; semantics live in ops
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __mul__(self, other):
        from . import ops
        if isinstance(other, Tensor):
            return ops.mul(self, other)
        return ops.scale(self, other)

    __rmul__ = __mul__

    def __truediv__(self, c):
        from . import ops
        return ops.scale(self, 1.0 / c)

    def __neg__(self):
        from . import ops
        return ops.scale(self, -1.0)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    @property
    def T(self):
        from . import ops
        return ops.transpose(self)

    def sum(self):
        from . import ops
        return ops.sum(self)

    def mean(self):
        from . import ops
        return ops.mean(self)


class Tape:
    """Ordered record of primitive ops with their parents and adjoint rules."""

    def __init__(self):
        self.nodes = []
        self._outputs = set()

    def __enter__(self):
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.pop()
        return False

    def __len__(self):
        return len(self.nodes)

    def record(self, out, parents, vjp):
        self.nodes.append((out, parents, vjp))
        self._outputs.add(id(out))

    def gradient(self, loss):
        return backward(self, loss)


def active_tape():
    return _ACTIVE[-1] if _ACTIVE else None


def make_result(data, parents, vjp):
    """Wrap op output and register it on the active tape when needed.

    ``vjp(g)`` maps the output adjoint to one adjoint per parent (``None``
    for parents that need none).
    """
    out = Tensor._wrap(data)
    if _ACTIVE and any(p.requires_grad for p in parents):
        out.requires_grad = True
        _ACTIVE[-1].record(out, parents, vjp)
    return out


def backward(tape, loss):
    """Reverse sweep from a scalar ``loss``.

    Returns a dict mapping every leaf tensor with ``requires_grad`` that is
    reachable from ``loss`` to its gradient (same shape as the leaf).
    """
    if loss.data.ndim != 0:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if id(loss) not in tape._outputs:
        raise ContractError("loss was not produced on this tape")

    grads = {id(loss): np.ones((), dtype=loss.dtype)}
    leaves = {}
    for out, parents, vjp in reversed(tape.nodes):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        parent_grads = vjp(g)
        for parent, pg in zip(parents, parent_grads):
            if not parent.requires_grad:
                continue
            key = id(parent)
            if key not in tape._outputs:
                leaves[key] = parent
            if pg is None:
                continue
            prev = grads.get(key)
            grads[key] = pg if prev is None else prev + pg

    result = {}
    for key, leaf in leaves.items():
        g = grads.get(key)
        if g is None:
            g = np.zeros_like(leaf.data)
        elif g.shape != leaf.shape:
            raise ContractError(f"gradient shape {g.shape} != parameter shape {leaf.shape}")
        result[leaf] = g
    return result
