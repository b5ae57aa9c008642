"""Compiled vs pure-Python kernel timings.

    python3 benchmarks/bench_kernels.py [--repeat 3]

Each kernel runs on the same inputs under both backends; outputs are checked
for equality before timing is reported.
"""
import argparse
import time

import numpy as np

from qsi import kernels
from qsi.model import Emitter, ScanGrid, Scene
from qsi.reconstruct import reconstruct
from qsi.simulate import expected_scan, simulate_scan


def _time(fn, repeat):
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def _same(a, b):
    if isinstance(a, tuple):
        return all(_same(x, y) for x, y in zip(a, b))
    if hasattr(a, "images"):
        return np.array_equal(a.images, b.images) and np.array_equal(a.flags, b.flags)
    return np.array_equal(np.asarray(a), np.asarray(b))


def cases():
    rng = np.random.default_rng(1)
    n = 200_000
    tau = 10e-9
    times = np.cumsum(rng.exponential(1 / 2e6, n))
    uni = rng.uniform(size=n)
    starts = np.sort(rng.uniform(0, 1.0, n))
    stops = np.sort(rng.uniform(0, 1.0, n))

    pair = Scene((Emitter(-183.05, 0, 18000.0), Emitter(183.05, 0, 9000.0)))
    g2d = ScanGrid(-585.0, -585.0, 30.0, 40, 40, 3500.0)
    sd2 = simulate_scan(pair, g2d, [2], 1)
    quad = Scene((Emitter(-110, -100, 20000.0), Emitter(120, -90, 14000.0), Emitter(100, 120, 9000.0),
                  Emitter(-90, 110, 5000.0)))
    g4d = ScanGrid(-585.0, -585.0, 30.0, 40, 40, 1e26)
    sd4 = expected_scan(quad, g4d, [2, 3, 4])
    return {
        "antibunched_accept (2e5 photons)": lambda: kernels.antibunched_accept(times, uni, tau),
        "start_stop_histogram (2e5 starts)": lambda: kernels.start_stop_histogram(starts, stops, 1e-7,
                                                                                   1e-9, 200),
        "reconstruct N=2, 40x40 (labels)": lambda: reconstruct(sd2, pair.detector, 2),
        "reconstruct N=4, 40x40 (labels)": lambda: reconstruct(sd4, quad.detector, 4),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args(argv)
    if "compiled" not in kernels.BACKENDS:
        print("compiled backend not built; run `pip install -e . --no-build-isolation` first")
        return 1
    print(f"{'kernel':36s} {'compiled':>10s} {'python':>10s} {'speedup':>8s}  same")
    prev = kernels.BACKEND
    try:
        for name, fn in cases().items():
            kernels.use_backend("compiled")
            tc, oc = _time(fn, args.repeat)
            kernels.use_backend("python")
            tp, op = _time(fn, max(1, args.repeat // 3))
            print(f"{name:36s} {tc * 1e3:9.1f}ms {tp * 1e3:9.1f}ms {tp / tc:7.1f}x  {_same(oc, op)}")
    finally:
        kernels.use_backend(prev)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
