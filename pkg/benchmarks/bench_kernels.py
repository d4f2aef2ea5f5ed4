"""Timing comparison of the coordinate descent kernels.

Runs the same sweep workload through the compiled extension and the numpy
fallback, reports wall time and the largest coefficient disagreement.
Usage: python benchmarks/bench_kernels.py [n] [p] [lam]
"""

import sys
import time

import numpy as np

from dprkit._backend import available_backends
from dprkit.regression import standardize


def bench(n=2000, p=120, lam=0.01, alpha=0.5, repeats=5, seed=7):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, p))
    beta_true = np.zeros(p)
    beta_true[: p // 10] = rng.normal(size=p // 10)
    y = X @ beta_true + 0.1 * rng.normal(size=n)
    dm = standardize(X, y)

    Xc = np.asfortranarray(dm.X - dm.X.mean(axis=0))
    yc = dm.y - dm.y.mean()
    col_scale = np.einsum("ij,ij->j", Xc, Xc) / n
    thresh = lam * alpha / 2.0
    l2 = lam * (1.0 - alpha)

    results = {}
    for name, kernel in sorted(available_backends().items()):
        best = float("inf")
        beta = None
        for _ in range(repeats):
            b = np.zeros(p)
            resid = yc.copy()
            t0 = time.perf_counter()
            sweeps, _, converged = kernel(
                Xc, resid, b, col_scale, thresh, l2, 1e-9, 100000
            )
            best = min(best, time.perf_counter() - t0)
            beta = b
        results[name] = (best, sweeps, converged, beta)
        print(f"{name:>10}: {best * 1e3:9.3f} ms  sweeps={sweeps}  converged={converged}")

    names = sorted(results)
    if len(names) == 2:
        left, right = (results[n][3] for n in names)
        gap = float(np.max(np.abs(left - right)))
        print(f"max |coef gap| between backends: {gap:.3e}")
        print(f"speedup compiled vs pure: {results['pure'][0] / results['compiled'][0]:.1f}x")
    else:
        print("only one backend importable; build the extension to compare")


if __name__ == "__main__":
    argv = sys.argv[1:]
    n = int(argv[0]) if len(argv) > 0 else 2000
    p = int(argv[1]) if len(argv) > 1 else 120
    lam = float(argv[2]) if len(argv) > 2 else 0.01
    bench(n=n, p=p, lam=lam)
