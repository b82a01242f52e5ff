"""Time the compiled and numpy kernels on simulated data.

Usage: python3 benchmarks/bench_kernels.py [--sizes 200,1000,5000] [--repeat 5]
"""

import argparse
import time

import numpy as np

from onlinecqr import kernels
from onlinecqr.core import QuantileGrid
from onlinecqr.sim import SimDesign, generate_batch


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        start = time.perf_counter()
        fn()
        times.append(time.perf_counter() - start)
    return min(times)


def path_job(mod, batch, grid):
    y = np.ascontiguousarray(batch.logx)
    delta = batch.delta.astype(float)
    z = np.ascontiguousarray(batch.z)
    w = np.ones(batch.n)
    h = grid.h_increments()

    def run():
        cw = np.full(batch.n, h[0])
        coefs = np.empty((grid.K, batch.p))
        basis = np.full(batch.p, -1, dtype=np.intp)
        status, level, _ = mod.fit_path(y, delta, z, w, h, 0, cw, basis, coefs,
                                        np.full(batch.p, np.nan), 100_000)
        assert status in (kernels.OK, kernels.DEGENERATE), status
    return run


def loss_job(mod, batch, evaluations=200):
    y = np.ascontiguousarray(batch.logx)
    delta = batch.delta.astype(float)
    z = np.ascontiguousarray(batch.z)
    w = np.ones(batch.n)
    cw = np.full(batch.n, 0.3)
    betas = np.random.default_rng(0).normal(scale=0.3, size=(evaluations, batch.p))
    score = np.empty(batch.p)

    def run():
        for b in betas:
            mod.loss_score(y, delta, z, w, cw, b, score)
    return run


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--sizes", default="200,1000,5000")
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args()

    backends = kernels.backends()
    if "cython" not in backends:
        print("compiled extension not built; run: python3 setup.py build_ext --inplace")
    grid = QuantileGrid.regular(0.01, 0.5)
    print(f"{'kernel':<12}{'n':>7}" + "".join(f"{name + ' (ms)':>16}" for name in sorted(backends))
          + ("      speedup" if len(backends) == 2 else ""))
    for n in (int(s) for s in args.sizes.split(",")):
        batch = generate_batch(SimDesign(n_b=n, seed=n, censor_upper=2.4247, target_censor_rate=None), 0)
        for label, make in (("fit_path", lambda m: path_job(m, batch, grid)),
                            ("loss_score", lambda m: loss_job(m, batch))):
            ms = {name: 1e3 * best_of(make(mod), args.repeat) for name, mod in backends.items()}
            line = f"{label:<12}{n:>7}" + "".join(f"{ms[name]:>16.2f}" for name in sorted(backends))
            if len(backends) == 2:
                line += f"{ms['python'] / ms['cython']:>12.1f}x"
            print(line)


if __name__ == "__main__":
    main()
