import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ipl.numerics import _kernels_py, kernels

ckernels = pytest.importorskip("ipl.numerics._ckernels")


def inputs(seed, rows, width, dtype):
    rng = np.random.default_rng(seed)
    x = (rng.standard_normal((rows, width)) * 3).astype(dtype)
    gy = rng.standard_normal((rows, width)).astype(dtype)
    mask = (rng.random((rows, width)) < 0.6).astype(np.uint8)
    mask[:, 0] = 1
    return rng, x, gy, mask


def assert_parity(a, b, dtype):
    tol = 1e-12 if dtype == np.float64 else 2e-5
    if isinstance(a, tuple):
        for u, v in zip(a, b):
            assert_parity(u, v, dtype)
        return
    np.testing.assert_allclose(np.asarray(a), np.asarray(b), rtol=tol, atol=tol)


@pytest.mark.parametrize("dtype", [np.float64, np.float32])
@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), rows=st.integers(1, 6), width=st.integers(1, 9))
def test_elementwise_and_row_kernels(dtype, seed, rows, width):
    rng, x, gy, mask = inputs(seed, rows, width, dtype)
    for name in ("sigmoid", "gelu"):
        assert_parity(getattr(ckernels, name)(x), getattr(_kernels_py, name)(x), dtype)
    assert_parity(ckernels.gelu_backward(x, gy), _kernels_py.gelu_backward(x, gy), dtype)
    for m in (None, mask):
        y_c = ckernels.softmax_rows(x, m)
        assert_parity(y_c, _kernels_py.softmax_rows(x, m), dtype)
        assert_parity(ckernels.softmax_rows_backward(y_c, gy), _kernels_py.softmax_rows_backward(y_c, gy), dtype)
    gamma = (1 + 0.1 * rng.standard_normal(width)).astype(dtype)
    beta = (0.1 * rng.standard_normal(width)).astype(dtype)
    ln_c = ckernels.layernorm_rows(x, gamma, beta, 1e-5)
    assert_parity(ln_c, _kernels_py.layernorm_rows(x, gamma, beta, 1e-5), dtype)
    assert_parity(
        ckernels.layernorm_rows_backward(gy, ln_c[1], ln_c[2], gamma),
        _kernels_py.layernorm_rows_backward(gy, ln_c[1], ln_c[2], gamma),
        dtype,
    )


@pytest.mark.parametrize("dtype", [np.float64, np.float32])
def test_reduction_and_scatter_kernels(dtype):
    rng = np.random.default_rng(0)
    x = rng.standard_normal((3, 5, 4)).astype(dtype)
    valid = (rng.random((3, 5)) < 0.5).astype(np.uint8)
    valid[:, 0] = 1
    assert_parity(ckernels.masked_mean(x, valid), _kernels_py.masked_mean(x, valid), dtype)

    logits = rng.standard_normal((6, 7)).astype(dtype)
    targets = rng.integers(0, 7, size=6)
    weights = np.array([1, 0, 2, 1, 1, 0.5], dtype=dtype)
    loss_c, probs_c = ckernels.cross_entropy_rows(logits, targets, weights)
    loss_p, probs_p = _kernels_py.cross_entropy_rows(logits, targets, weights)
    assert_parity(float(loss_c), float(loss_p), dtype)
    assert_parity(probs_c, probs_p, dtype)

    ids = np.array([0, 3, 3, 1, 0], dtype=np.int64)
    g = rng.standard_normal((5, 4)).astype(dtype)
    assert_parity(ckernels.scatter_add_rows(ids, g, 5), _kernels_py.scatter_add_rows(ids, g, 5), dtype)


def test_fully_masked_row_is_zero():
    x = np.ones((2, 3))
    mask = np.array([[0, 0, 0], [1, 1, 0]], dtype=np.uint8)
    for impl in (ckernels, _kernels_py):
        y = impl.softmax_rows(x, mask)
        np.testing.assert_array_equal(y[0], 0.0)
        np.testing.assert_allclose(y[1], [0.5, 0.5, 0.0])


def test_backend_switching():
    assert set(kernels.available_backends()) >= {"python", "cython"}
    start = kernels.backend_name()
    with kernels.use_backend("python"):
        assert kernels.backend_name() == "python"
    assert kernels.backend_name() == start
    with pytest.raises(ValueError):
        kernels.set_backend("fortran")


def test_environment_forces_python_backend():
    env = dict(os.environ, IPL_PURE_PYTHON="1")
    out = subprocess.run(
        [sys.executable, "-c", "from ipl.numerics import kernels; print(kernels.backend_name())"],
        env=env, capture_output=True, text=True, check=True,
    )
    assert out.stdout.strip() == "python"


def test_training_step_identical_across_backends():
    from ipl.model import ModelConfig
    from ipl.tasks import gen_synthetic_cls
    from ipl.train import OptimConfig, build_models, collate, new_state, train_step

    data = gen_synthetic_cls(0, 40)
    losses = {}
    for name in ("python", "cython"):
        with kernels.use_backend(name):
            cfg = OptimConfig(prompt_length=4, seed=2)
            pm, lm = build_models(ModelConfig(d_e=16, d_ff=32, n_heads=2), cfg)
            state = new_state(cfg)
            batch = collate(data.train[:8], "cls", pm, lm)
            losses[name] = [train_step(batch, state, pm, lm, cfg)[1] for _ in range(3)]
    np.testing.assert_allclose(losses["python"], losses["cython"], rtol=1e-12)
