"""Benchmark the compiled depthwise-convolution kernels against the pure
NumPy fallback, and check they agree.

Run:  python3 benchmarks/bench_kernels.py
"""

import time

import numpy as np

from xicpeak.nn import kernels_py

try:
    from xicpeak.nn import _kernels
except ImportError:
    _kernels = None


def bench(fn, args, repeats=20):
    fn(*args)  # warm up
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    rng = np.random.default_rng(0)
    cases = [
        ("training batch", (32, 64, 175), 15),
        ("small kernel", (32, 64, 175), 3),
        ("eval batch", (64, 64, 175), 15),
    ]
    print(f"{'case':<16} {'shape':<16} {'k':>3} {'numpy fwd':>11} {'cython fwd':>11} "
          f"{'numpy bwd':>11} {'cython bwd':>11} {'speedup':>8}")
    for name, shape, k in cases:
        x = rng.standard_normal(shape, dtype=np.float32)
        w = rng.standard_normal((shape[1], k)).astype(np.float32)
        t_np_f = bench(kernels_py.dwconv_forward, (x, w))
        y = kernels_py.dwconv_forward(x, w)
        dy = rng.standard_normal(y.shape, dtype=np.float32)
        t_np_b = bench(kernels_py.dwconv_backward, (x, w, dy))
        if _kernels is None:
            print(f"{name:<16} {str(shape):<16} {k:>3} {t_np_f*1e3:>9.2f}ms "
                  f"{'n/a':>11} {t_np_b*1e3:>9.2f}ms {'n/a':>11} {'n/a':>8}")
            continue
        t_cy_f = bench(_kernels.dwconv_forward, (x, w))
        t_cy_b = bench(_kernels.dwconv_backward, (x, w, dy))
        y_cy = _kernels.dwconv_forward(x, w)
        np.testing.assert_allclose(y, y_cy, atol=1e-5)
        dx, dw = kernels_py.dwconv_backward(x, w, dy)
        dx_cy, dw_cy = _kernels.dwconv_backward(x, w, dy)
        np.testing.assert_allclose(dx, dx_cy, atol=1e-4)
        np.testing.assert_allclose(dw, dw_cy, rtol=1e-4, atol=1e-3)
        speedup = (t_np_f + t_np_b) / (t_cy_f + t_cy_b)
        print(f"{name:<16} {str(shape):<16} {k:>3} {t_np_f*1e3:>9.2f}ms "
              f"{t_cy_f*1e3:>9.2f}ms {t_np_b*1e3:>9.2f}ms {t_cy_b*1e3:>9.2f}ms "
              f"{speedup:>7.2f}x")
    if _kernels is None:
        print("\ncompiled extension not available; only the NumPy fallback was timed")


if __name__ == "__main__":
    main()
