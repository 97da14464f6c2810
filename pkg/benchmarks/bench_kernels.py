"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat N]

Prints one line per (kernel, backend) with the best-of-N wall time and the speedup.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from latentbfr import kernels
from latentbfr.degradation import quality_steps


def best_of(fn, repeat: int) -> float:
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main(argv=None) -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    rng = np.random.default_rng(0)
    cases = {
        "nearest_code 16384x512 (d=3)": (kernels.nearest_code, (rng.normal(size=(16384, 3)), rng.normal(size=(512, 3)))),
        "block_dct 3x512x512": (kernels.block_dct_quantize, (rng.uniform(-128, 128, (3, 512, 512)), quality_steps(50))),
    }
    backends = kernels.available_backends()
    print(f"backends: {backends} (import-time default: {kernels.BACKEND})")
    for name, (fn, inputs) in cases.items():
        timings = {b: best_of(lambda: fn(*inputs, backend=b), args.repeat) for b in backends}
        ref = timings["python"]
        for b, t in timings.items():
            print(f"{name:32s} {b:7s} {t * 1e3:9.2f} ms  x{ref / t:5.1f}")


if __name__ == "__main__":
    main()
