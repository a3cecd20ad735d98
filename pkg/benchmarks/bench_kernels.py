"""Time the compiled kernels against the NumPy reference backend.

Run:  python benchmarks/bench_kernels.py
"""

import time

import numpy as np

from kpp import backend


def _time(fn, *args, repeats=5):
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    rng = np.random.default_rng(0)
    cases = {
        "conv2d_forward 8x16x28x28 k3": (
            "conv2d_forward",
            (rng.normal(size=(8, 16, 28, 28)), rng.normal(size=(32, 16, 3, 3)), 2, 1),
        ),
        "conv2d_input_grad": (
            "conv2d_input_grad",
            (rng.normal(size=(8, 32, 14, 14)), rng.normal(size=(32, 16, 3, 3)), 2, 1, 28, 28),
        ),
        "conv2d_kernel_grad": (
            "conv2d_kernel_grad",
            (rng.normal(size=(8, 32, 14, 14)), rng.normal(size=(8, 16, 28, 28)), 2, 1, 3, 3),
        ),
        "bilinear_forward 8 reads of 3x64x64": (
            "bilinear_forward",
            (rng.normal(size=(8, 3, 64, 64)), rng.uniform(-1, 1, size=(8, 2, 16, 16, 2))),
        ),
        "bilinear_image_grad": (
            "bilinear_image_grad",
            (rng.normal(size=(8, 2, 3, 16, 16)), rng.uniform(-1, 1, size=(8, 2, 16, 16, 2)), 64, 64),
        ),
        "bilinear_grid_grad": (
            "bilinear_grid_grad",
            (rng.normal(size=(8, 2, 3, 16, 16)), rng.normal(size=(8, 3, 64, 64)),
             rng.uniform(-1, 1, size=(8, 2, 16, 16, 2))),
        ),
    }
    backends = backend.get_backends()
    print(f"available backends: {', '.join(backends)} (active: {backend.BACKEND})")
    header = f"{'kernel':40s}" + "".join(f"{name:>12s}" for name in backends)
    print(header)
    print("-" * len(header))
    for label, (fn_name, args) in cases.items():
        times = []
        outs = []
        for mod in backends.values():
            fn = getattr(mod, fn_name)
            times.append(_time(fn, *args))
            outs.append(fn(*args))
        row = f"{label:40s}" + "".join(f"{t * 1e3:10.2f}ms" for t in times)
        if len(outs) == 2:
            err = np.max(np.abs(outs[0] - outs[1]))
            speedup = times[0] / times[1] if times[1] > 0 else np.inf
            row += f"   x{speedup:5.1f}  max|diff| {err:.1e}"
        print(row)


if __name__ == "__main__":
    main()
