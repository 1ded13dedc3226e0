"""Compiled vs. pure-Python linalg kernels.

    python3 benchmarks/bench_linalg.py [--sizes 16,32,64,128] [--repeat 5]

Prints the best-of-``repeat`` wall time per call for Cholesky solves and the
Jacobi eigendecomposition, plus the speedup of the compiled core.
"""
import argparse
import timeit

import numpy as np

from ntk_lab import linalg


def spd(n, seed=0):
    rng = np.random.default_rng(seed)
    G = rng.standard_normal((n, 2 * n))
    return G @ G.T / (2 * n) + 0.1 * np.eye(n)


def best(fn, repeat):
    number = 1
    while timeit.timeit(fn, number=number) < 0.05 and number < 10_000:
        number *= 4
    return min(timeit.repeat(fn, number=number, repeat=repeat)) / number


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", default="16,32,64,128")
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    sizes = [int(s) for s in args.sizes.split(",")]
    names = linalg.backends()
    if "cython" not in names:
        print("compiled core not built; only the python backend is timed")

    print(f"{'op':<16}{'n':>6}" + "".join(f"{b + ' [ms]':>16}" for b in names) + f"{'speedup':>10}")
    for n in sizes:
        A = spd(n)
        B = np.random.default_rng(1).standard_normal((n, 4))
        for op, fn in (("cholesky_solve", lambda b: linalg.cholesky_solve(A, B, backend=b)),
                       ("sym_eig", lambda b: linalg.sym_eig(A, backend=b))):
            times = {b: best(lambda b=b: fn(b), args.repeat) for b in names}
            line = f"{op:<16}{n:>6}" + "".join(f"{1e3 * times[b]:>16.3f}" for b in names)
            if len(names) == 2:
                line += f"{times['python'] / times['cython']:>9.1f}x"
            print(line, flush=True)


if __name__ == "__main__":
    main()
