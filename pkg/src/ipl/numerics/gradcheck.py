"""Central finite-difference verification of tape gradients."""

from dataclasses import dataclass

import numpy as np

from ..errors import ContractError
from . import kernels
from .tensor import Tape, backward

DENOM_FLOOR = 1e-8


@dataclass
class ParamCheck:
    name: str
    max_rel_error: float
    worst_index: tuple
    analytic: float
    numeric: float
    n_checked: int


def relative_error(analytic, numeric):
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), DENOM_FLOOR)


def _elements_to_check(grad, max_elements, rng):
    size = grad.size
    if max_elements is None or size <= max_elements:
        return np.arange(size)
    # always include the largest-magnitude entry, then a uniform sample
    top = int(np.argmax(np.abs(grad).reshape(-1)))
    rest = rng.choice(size, size=max_elements - 1, replace=False)
    return np.unique(np.concatenate([[top], rest]))


def finite_diff_check(f, params, h=1e-5, max_elements=None, seed=0, oracle_dtype=None, extended_below=None):
    """Compare backprop gradients of ``f()`` with central differences.

    ``f`` is a zero-argument callable returning a scalar Tensor computed from
    the tensors in ``params`` (a name -> Tensor mapping).  Each checked
    element ``i`` is compared against ``(f(θ+h·eᵢ) - f(θ-h·eᵢ)) / 2h``.
    ``max_elements`` bounds the number of elements probed per tensor.

    A float64 loss value resolves differences only down to about
    ``1e-16 / 2h``, so elements with tiny gradients sit on a rounding floor.
    With ``oracle_dtype`` (e.g. ``np.longdouble``) the perturbed evaluations
    run at that precision on the numpy backend; ``extended_below`` restricts
    this to elements with ``|g|`` under the threshold.  ``params`` must then
    hold every tensor ``f`` reads.  The analytic gradient is always 64-bit.

    Returns ``{name: ParamCheck}`` holding the worst element per tensor.
    """
    for name, p in params.items():
        if p.dtype != np.float64:
            raise ContractError(f"finite_diff_check needs 64-bit parameters; {name} is {p.dtype}")

    with Tape() as tape:
        loss = f()
    grads = backward(tape, loss)
    grads = {name: grads.get(p, np.zeros(p.shape)) for name, p in params.items()}
    rng = np.random.default_rng(seed)
    checked = {name: _elements_to_check(g, max_elements, rng) for name, g in grads.items()}

    plain, extended = {}, {}
    for name, idx in checked.items():
        if oracle_dtype is None:
            high = np.zeros(len(idx), dtype=bool)
        elif extended_below is None:
            high = np.ones(len(idx), dtype=bool)
        else:
            high = np.abs(grads[name].reshape(-1)[idx]) < extended_below
        plain[name], extended[name] = idx[~high], idx[high]

    numeric = {name: {} for name in params}
    for name, p in params.items():
        numeric[name].update(_differences(f, p, plain[name], h))
    if any(len(idx) for idx in extended.values()):
        originals = {name: p.data for name, p in params.items()}
        try:
            with kernels.use_backend("python"):
                for p in params.values():
                    p.data = p.data.astype(oracle_dtype)
                for name, p in params.items():
                    numeric[name].update(_differences(f, p, extended[name], h))
        finally:
            for name, p in params.items():
                p.data = originals[name]

    report = {}
    for name, p in params.items():
        flat_g = grads[name].reshape(-1)
        worst = ParamCheck(name, 0.0, (), 0.0, 0.0, len(checked[name]))
        for i in checked[name]:
            analytic = float(flat_g[i])
            err = relative_error(analytic, numeric[name][int(i)])
            if err > worst.max_rel_error or not worst.worst_index:
                index = tuple(int(k) for k in np.unravel_index(i, p.shape))
                worst = ParamCheck(name, err, index, analytic, numeric[name][int(i)], len(checked[name]))
        report[name] = worst
    return report


def _differences(f, p, indices, h):
    """Central differences of ``f`` along the flat ``indices`` of ``p``."""
    base = p.data
    work = base.copy()
    p.data = work
    flat = work.reshape(-1)
    h = work.dtype.type(h)
    out = {}
    try:
        for i in indices:
            x0 = flat[i]
            flat[i] = x0 + h
            up = f().data
            flat[i] = x0 - h
            down = f().data
            flat[i] = x0
            out[int(i)] = float((up - down) / (2 * h))
    finally:
        p.data = base
    return out
