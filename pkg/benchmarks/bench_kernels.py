"""Time the compiled and the scipy.sparse gather/scatter kernels.

Usage: python benchmarks/bench_kernels.py [--bandwidths 4 8] [--repeat 5]

Reports the best-of-``repeat`` wall time of the S2 and SO(3) tap gathers,
their adjoint scatters and a full forward pass of the default network, once
per available backend, plus the speed-up and the max abs difference between
backends.
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from orientkit import kernels
from orientkit.correlation import init_params, network_forward
from orientkit.signals import GridSpec


def best_time(fn, repeat: int) -> float:
    fn()  # warm-up (builds the sparse operators on first use)
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def cases(b: int, rng):
    n = 2 * b
    out = []
    for kind, table in (("s2", kernels.s2_table(n)), ("so3", kernels.so3_table(n))):
        v = rng.standard_normal((4, table.size))
        d = rng.standard_normal((4, n, n, n))
        out.append((f"{kind}-gather", lambda v=v, t=table: kernels.gather(v, t)))
        out.append((f"{kind}-scatter", lambda d=d, t=table: kernels.scatter(d, t)))
    g = GridSpec(b, 4)
    p = init_params(g, (8, 4, 2, 1), rng)
    f = rng.random((4, n, n))
    out.append(("forward", lambda: network_forward(p, f)))
    return out


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--bandwidths", type=int, nargs="+", default=[4, 8])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)

    old = kernels.get_backend()
    print(f"backends available: {', '.join(kernels.BACKENDS)}")
    header = f"{'B':>3} {'case':<12}" + "".join(f"{name:>12}" for name in kernels.BACKENDS)
    if len(kernels.BACKENDS) == 2:
        header += f"{'speed-up':>10} {'max diff':>10}"
    print(header)
    for b in args.bandwidths:
        names = [name for name, _ in cases(b, np.random.default_rng(0))]
        timings, results = {}, {}
        for backend in kernels.BACKENDS:
            kernels.set_backend(backend)
            for name, fn in cases(b, np.random.default_rng(0)):
                timings[backend, name] = best_time(fn, args.repeat)
                results[backend, name] = fn()
        for name in names:
            row = f"{b:>3} {name:<12}" + "".join(
                f"{timings[k, name] * 1e3:>10.2f}ms" for k in kernels.BACKENDS)
            if len(kernels.BACKENDS) == 2:
                fast, slow = kernels.BACKENDS
                diff = np.abs(results[fast, name] - results[slow, name]).max()
                row += f"{timings[slow, name] / timings[fast, name]:>9.1f}x {diff:>10.1e}"
            print(row)
    kernels.set_backend(old)


if __name__ == "__main__":
    main()
