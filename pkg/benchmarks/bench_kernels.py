"""Compare the compiled and numpy kernel backends.

Times each kernel on representative shapes, then a full training step of
the default model. Run with ``python benchmarks/bench_kernels.py``.
"""

import argparse
import timeit

import numpy as np

from ipl.numerics import _kernels_py, kernels
from ipl.model import ModelConfig
from ipl.tasks import gen_synthetic_cls
from ipl.train import OptimConfig, build_models, collate, new_state, train_step


def kernel_cases(rows, width, dtype):
    rng = np.random.default_rng(0)
    x = rng.standard_normal((rows, width)).astype(dtype)
    gy = rng.standard_normal((rows, width)).astype(dtype)
    mask = (rng.random((rows, width)) < 0.8).astype(np.uint8)
    gamma, beta = np.ones(width, dtype), np.zeros(width, dtype)
    _, xhat, rstd = _kernels_py.layernorm_rows(x, gamma, beta, 1e-5)
    y = _kernels_py.softmax_rows(x, mask)
    x3 = x.reshape(rows // 16, 16, width)
    valid = np.ones((rows // 16, 16), dtype=np.uint8)
    targets = rng.integers(0, width, size=rows)
    weights = np.ones(rows, dtype)
    ids = rng.integers(0, 64, size=rows)
    return {
        "sigmoid": lambda k: k.sigmoid(x),
        "gelu": lambda k: k.gelu(x),
        "gelu_backward": lambda k: k.gelu_backward(x, gy),
        "softmax_rows": lambda k: k.softmax_rows(x, mask),
        "softmax_rows_backward": lambda k: k.softmax_rows_backward(y, gy),
        "layernorm_rows": lambda k: k.layernorm_rows(x, gamma, beta, 1e-5),
        "layernorm_rows_backward": lambda k: k.layernorm_rows_backward(gy, xhat, rstd, gamma),
        "masked_mean": lambda k: k.masked_mean(x3, valid),
        "cross_entropy_rows": lambda k: k.cross_entropy_rows(x, targets, weights),
        "scatter_add_rows": lambda k: k.scatter_add_rows(ids, gy, 64),
    }


def best_time(fn, repeat, number):
    return min(timeit.repeat(fn, repeat=repeat, number=number)) / number


def bench_kernels(rows, width, dtype, repeat, number):
    impls = {name: kernels._BACKENDS[name] for name in kernels.available_backends()}
    print(f"kernels on ({rows}, {width}) {np.dtype(dtype).name}")
    print(f"{'kernel':26s}" + "".join(f"{name:>12s}" for name in impls) + f"{'speedup':>10s}")
    for name, case in kernel_cases(rows, width, dtype).items():
        times = {b: best_time(lambda: case(k), repeat, number) for b, k in impls.items()}
        line = f"{name:26s}" + "".join(f"{t * 1e6:10.1f}us" for t in times.values())
        if "cython" in times:
            line += f"{times['python'] / times['cython']:9.2f}x"
        print(line)


def bench_train_step(batch_size, prompt_length, repeat):
    data = gen_synthetic_cls(0, 200)
    print(f"\ntrain step, default model, batch {batch_size}, l={prompt_length}")
    times = {}
    for name in kernels.available_backends():
        with kernels.use_backend(name):
            cfg = OptimConfig(prompt_length=prompt_length, seed=0)
            pm, lm = build_models(ModelConfig(), cfg)
            state = new_state(cfg)
            batch = collate(data.train[:batch_size], "cls", pm, lm)
            train_step(batch, state, pm, lm, cfg)  # warm up
            times[name] = best_time(lambda: train_step(batch, state, pm, lm, cfg), repeat, 1)
        print(f"{name:10s}{times[name] * 1e3:10.2f} ms")
    if "cython" in times:
        print(f"speedup   {times['python'] / times['cython']:9.2f}x")


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--rows", type=int, default=512)
    parser.add_argument("--width", type=int, default=64)
    parser.add_argument("--float-width", type=int, choices=(32, 64), default=64)
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--number", type=int, default=200)
    parser.add_argument("--batch-size", type=int, default=16)
    parser.add_argument("--l", dest="prompt_length", type=int, default=16)
    args = parser.parse_args()
    dtype = np.float64 if args.float_width == 64 else np.float32
    bench_kernels(args.rows, args.width, dtype, args.repeat, args.number)
    bench_train_step(args.batch_size, args.prompt_length, args.repeat)


if __name__ == "__main__":
    main()
