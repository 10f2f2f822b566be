"""Benchmark the numba kernels against the pure-numpy fallbacks.

Runs each hot kernel on training-shaped inputs and prints a table of
per-call times plus the speedup. Invoke from the repo root:

    python3 benchmarks/bench_kernels.py [--repeat N]

The active backend for the package itself is chosen at import time from
SEMAFORGE_BACKEND; this script always times both implementations directly.
"""

import argparse
import time

import numpy as np

from semaforge import kernels as K


def _time(fn, args, repeat):
    fn(*args)                      # warm (jit compile / cache touch)
    t0 = time.perf_counter()
    for _ in range(repeat):
        fn(*args)
    return (time.perf_counter() - t0) / repeat


def build_cases(rng):
    x = rng.normal(size=(16, 64, 64, 3))
    k = rng.normal(size=(3, 3, 3, 16))
    b = rng.normal(size=16)
    gy = rng.normal(size=(16, 64, 64, 16))
    hull = np.array([[20.0, 10.0], [100.0, 25.0], [110.0, 90.0],
                     [60.0, 118.0], [15.0, 70.0]])
    img = rng.uniform(size=(128, 128, 3))
    grid_y = rng.uniform(0, 127, size=(128, 128))
    grid_x = rng.uniform(0, 127, size=(128, 128))
    return [
        ("conv2d_forward 16x64x64x3 -> 16ch",
         K.conv2d_forward_np, (x, k, b)),
        ("conv2d_backward_input",
         K.conv2d_backward_input_np, (gy, k)),
        ("conv2d_backward_kernel",
         K.conv2d_backward_kernel_np, (x, gy, 3)),
        ("polygon_fill 128x128, 5 edges",
         K.polygon_fill_np, (np.ascontiguousarray(hull[:, 0]),
                             np.ascontiguousarray(hull[:, 1]), 128, 128)),
        ("resize_bilinear 128->64",
         K.resize_bilinear_np, (img, 64, 64)),
        ("warp_bilinear 128x128",
         K.warp_bilinear_np, (img, grid_y, grid_x)),
    ]


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeat", type=int, default=20)
    args = parser.parse_args()

    if not K.HAS_NUMBA:
        print("numba not installed: timing the numpy path only")
    rng = np.random.Generator(np.random.PCG64(0))
    cases = build_cases(rng)

    header = f"{'kernel':38s} {'numpy':>10s} {'numba':>10s} {'speedup':>8s}"
    print(header)
    print("-" * len(header))
    for name, np_fn, call_args in cases:
        t_np = _time(np_fn, call_args, args.repeat)
        if K.HAS_NUMBA:
            nb_fn = getattr(K, np_fn.__name__.replace("_np", "_nb"))
            t_nb = _time(nb_fn, call_args, args.repeat)
            print(f"{name:38s} {t_np * 1e3:9.2f}ms {t_nb * 1e3:9.2f}ms "
                  f"{t_np / t_nb:7.1f}x")
        else:
            print(f"{name:38s} {t_np * 1e3:9.2f}ms {'-':>10s} {'-':>8s}")


if __name__ == "__main__":
    main()
