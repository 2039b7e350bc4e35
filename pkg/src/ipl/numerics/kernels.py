"""Kernel backend selection.

The compiled ``_ckernels`` extension is used when it imports; otherwise the
numpy implementation in ``_kernels_py`` is used. Setting ``IPL_PURE_PYTHON=1``
forces the numpy backend. Ops look kernels up through ``kernels.impl`` at
call time, so :func:`use_backend` takes effect immediately.
"""

import contextlib
import os

from . import _kernels_py

try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None

_BACKENDS = {"python": _kernels_py}
if _ckernels is not None:
    _BACKENDS["cython"] = _ckernels

if os.environ.get("IPL_PURE_PYTHON") == "1" or _ckernels is None:
    impl = _kernels_py
else:
    impl = _ckernels


def available_backends():
    return sorted(_BACKENDS)


def backend_name():
    return impl.BACKEND


def set_backend(name):
    """Switch the active kernel backend; returns the previous backend name."""
    global impl
    if name not in _BACKENDS:
        raise ValueError(f"unknown or unavailable backend {name!r}; have {available_backends()}")
    previous = impl.BACKEND
    impl = _BACKENDS[name]
    return previous


@contextlib.contextmanager
def use_backend(name):
    previous = set_backend(name)
    try:
        yield
    finally:
        set_backend(previous)
