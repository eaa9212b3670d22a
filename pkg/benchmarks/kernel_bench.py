"""Throughput comparison of the numba and numpy kernel backends.

Times the two hot loops (forward-model frame synthesis and per-pixel
first-harmonic reduction) on scan-shaped workloads:

    python benchmarks/kernel_bench.py [--size 256] [--steps 50] [--repeat 7]
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from gratingscope._kernels import numpy_impl

try:
    from gratingscope._kernels import numba_impl
except ImportError:
    numba_impl = None


def best_of(fn, repeat: int) -> float:
    times = []
    for _ in range(repeat):
        start = time.perf_counter()
        fn()
        times.append(time.perf_counter() - start)
    return min(times)


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--size", type=int, default=256, help="frame edge, pixels")
    parser.add_argument("--steps", type=int, default=50, help="stack depth")
    parser.add_argument("--repeat", type=int, default=7, help="timing repeats (best-of)")
    args = parser.parse_args()

    rng = np.random.default_rng(0)
    shape = (args.size, args.size)
    amp = rng.uniform(1e3, 2e4, shape)
    vis = rng.uniform(0.05, 0.3, shape)
    phase = rng.uniform(-3.0, 3.0, shape)
    stack = rng.uniform(1e3, 2e4, (args.steps, *shape))
    k = np.arange(args.steps)
    cos_k = np.cos(2 * np.pi * k / args.steps)
    sin_k = np.sin(2 * np.pi * k / args.steps)

    backends = {"numpy": numpy_impl}
    if numba_impl is not None:
        # trigger JIT outside the timed region
        numba_impl.stepping_frame(amp, vis, phase, 0.1)
        numba_impl.harmonic_sums(stack, cos_k, sin_k)
        backends["numba"] = numba_impl
    else:
        print("numba unavailable; timing the numpy fallback only")

    results: dict[str, dict[str, float]] = {}
    for name, impl in backends.items():
        results[name] = {
            "stepping_frame": best_of(lambda: impl.stepping_frame(amp, vis, phase, 0.37),
                                      args.repeat),
            "harmonic_sums": best_of(lambda: impl.harmonic_sums(stack, cos_k, sin_k),
                                     args.repeat),
        }

    px = args.size * args.size
    print(f"\nframe {args.size}x{args.size}, stack depth {args.steps}, "
          f"best of {args.repeat}\n")
    header = f"{'kernel':<16} {'backend':<8} {'time':>10} {'Mpix/s':>10}"
    print(header)
    print("-" * len(header))
    for kernel in ("stepping_frame", "harmonic_sums"):
        for name in backends:
            seconds = results[name][kernel]
            work = px if kernel == "stepping_frame" else px * args.steps
            print(f"{kernel:<16} {name:<8} {seconds * 1e3:>8.2f}ms "
                  f"{work / seconds / 1e6:>10.1f}")
        if len(backends) == 2:
            speedup = results["numpy"][kernel] / results["numba"][kernel]
            print(f"{'':<16} numba speedup: {speedup:.2f}x")
    print()


if __name__ == "__main__":
    main()
