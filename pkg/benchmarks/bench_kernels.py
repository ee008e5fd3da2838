"""Time the compiled kernels against the pure-Python fallback.

    python benchmarks/bench_kernels.py [--repeat N]

Prints one line per kernel and backend with the median wall time and the
speedup of the compiled build.  Both backends get identical inputs.
"""
import argparse
import statistics
import time

import numpy as np

from owqf import kernels


def _cases(rng):
    cost = rng.random((60, 40))
    ious = rng.random((300, 200))
    thr = np.round(np.arange(0.5, 0.951, 0.05), 2)
    saliency = rng.random((32, 32))
    return {
        "linear_sum_assignment 60x40": lambda b: b.linear_sum_assignment(cost),
        "greedy_match 300x200 x10 thr": lambda b: b.greedy_match(ious, thr),
        "peak_nms 32x32": lambda b: b.peak_nms(saliency, 0.3, 2),
    }


def _median_time(fn, repeat):
    fn()  # warm up
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args(argv)
    backends = {"python": kernels.python_backend}
    if kernels.compiled_backend is not None:
        backends["cython"] = kernels.compiled_backend
    else:
        print("compiled extension not built; timing the fallback only")
    for name, fn in _cases(np.random.default_rng(0)).items():
        t = {k: _median_time(lambda: fn(b), args.repeat) for k, b in backends.items()}
        line = "  ".join(f"{k} {v * 1e3:9.3f} ms" for k, v in t.items())
        if "cython" in t:
            line += f"  speedup {t['python'] / t['cython']:6.1f}x"
        print(f"{name:<32} {line}")


if __name__ == "__main__":
    main()
