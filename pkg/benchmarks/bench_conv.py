"""Benchmark the numba conv kernels against the pure-numpy fallback.

Run: python benchmarks/bench_conv.py
"""

import time

import numpy as np

from recnsi import _conv_numba, _conv_numpy

SHAPES = [
    # (B, Cin, H, W, Cout, k)
    (64, 1, 32, 32, 8, 9),
    (64, 8, 26, 26, 8, 3),
    (64, 16, 26, 26, 16, 3),
    (16, 8, 42, 42, 8, 3),
]


def bench(fn, *args, reps=5):
    fn(*args)  # warmup / jit compile
    t0 = time.perf_counter()
    for _ in range(reps):
        fn(*args)
    return (time.perf_counter() - t0) / reps


def main():
    rng = np.random.default_rng(0)
    header = (f"{'shape':38s} {'numba fwd':>10s} {'numpy fwd':>10s}"
              f" {'numba gw':>10s} {'numpy gw':>10s}"
              f" {'numba gx':>10s} {'numpy gx':>10s}")
    print(header)
    for B, Cin, H, W, Cout, k in SHAPES:
        x = rng.standard_normal((B, Cin, H, W))
        w = rng.standard_normal((Cout, Cin, k, k))
        gy = rng.standard_normal((B, Cout, H - k + 1, W - k + 1))
        tf_nb = bench(_conv_numba.conv2d_forward, x, w)
        tf_np = bench(_conv_numpy.conv2d_forward, x, w)
        tg_nb = bench(_conv_numba.conv2d_grad_kernel, x, gy)
        tg_np = bench(_conv_numpy.conv2d_grad_kernel, x, gy)
        tx_nb = bench(_conv_numba.conv2d_grad_input, w, gy, H, W, 0)
        tx_np = bench(_conv_numpy.conv2d_grad_input, w, gy, H, W, 0)
        label = f"B{B} {Cin}x{H}x{W} -> {Cout} k{k}"
        print(f"{label:38s} {tf_nb*1e3:9.2f}ms {tf_np*1e3:9.2f}ms"
              f" {tg_nb*1e3:9.2f}ms {tg_np*1e3:9.2f}ms"
              f" {tx_nb*1e3:9.2f}ms {tx_np*1e3:9.2f}ms")
        assert np.allclose(
            _conv_numba.conv2d_forward(x, w), _conv_numpy.conv2d_forward(x, w)
        )
        assert np.allclose(
            _conv_numba.conv2d_grad_kernel(x, gy), _conv_numpy.conv2d_grad_kernel(x, gy)
        )
        assert np.allclose(
            _conv_numba.conv2d_grad_input(w, gy, H, W, 0),
            _conv_numpy.conv2d_grad_input(w, gy, H, W, 0),
        )


if __name__ == "__main__":
    main()
