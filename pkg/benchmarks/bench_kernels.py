"""Time the compiled kernels against the pure-Python fallback.

    python benchmarks/bench_kernels.py [--repeat N]
"""
import argparse
import timeit

import numpy as np

from graphnmf._kernels import _fallback
from graphnmf.admm import gram_factor

try:
    from graphnmf._kernels import _ckernels
except ImportError:
    _ckernels = None


def admm_case(n, r, iters, seed=0):
    rng = np.random.default_rng(seed)
    W = rng.random((3 * r, r))
    F = gram_factor(W, 1.0)
    rhs = np.ascontiguousarray(rng.random((n, r)))

    def run(mod):
        H, Ht, U = np.zeros((n, r)), np.zeros((n, r)), np.zeros((n, r))
        mod.admm_rows(F, rhs, H, Ht, U, 1.0, iters)

    return f"admm_rows n={n} r={r} iters={iters}", run


def jacobi_case(m, n, seed=0):
    A0 = np.random.default_rng(seed).random((m, n))

    def run(mod):
        mod.jacobi_sweeps(np.asfortranarray(A0.copy()), np.asfortranarray(np.eye(n)), 1e-12, 100)

    return f"jacobi_sweeps {m}x{n}", run


CASES = [
    admm_case(25, 4, 10),
    admm_case(400, 10, 10),
    admm_case(2000, 10, 50),
    jacobi_case(25, 20),
    jacobi_case(200, 50),
]


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args()
    if _ckernels is None:
        print("compiled extension not built; only the fallback is available")
    print(f"{'case':<36}{'cython ms':>12}{'python ms':>12}{'speedup':>10}")
    for label, run in CASES:
        times = {}
        for name, mod in (("cython", _ckernels), ("python", _fallback)):
            if mod is None:
                continue
            timer = timeit.Timer(lambda run=run, mod=mod: run(mod))
            times[name] = 1e3 * min(timer.repeat(number=1, repeat=args.repeat))
        cy, py = times.get("cython", float("nan")), times["python"]
        print(f"{label:<36}{cy:>12.3f}{py:>12.3f}{py / cy:>9.1f}x")


if __name__ == "__main__":
    main()
