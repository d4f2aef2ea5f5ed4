"""Numpy fallback for the coordinate-descent sweep kernel.

Same cyclic update order and convergence rule as the compiled kernel in
_cd_kernel.pyx; results agree to floating-point roundoff.
"""

from __future__ import annotations

import math


BACKEND_NAME = "pure"


def enet_sweeps(X, resid, beta, col_scale, thresh, l2, tol, max_sweeps):
    """Run cyclic soft-threshold sweeps in place.

    X          (n, p) centered active columns, Fortran order
    resid      current residual y_c - X @ beta, updated in place
    beta       coefficient vector, updated in place
    col_scale  per-column squared norm divided by n
    thresh     L1 threshold, lambda * alpha / 2
    l2         L2 denominator add-on, lambda * (1 - alpha)
    Returns (sweeps_run, last_max_delta, converged); converged means the
    largest coefficient change in the final sweep fell below tol.
    """
    n, p = X.shape
    sweeps = 0
    maxd = 0.0
    for _ in range(max_sweeps):
        maxd = 0.0
        for j in range(p):
            bj = beta[j]
            colj = X[:, j]
            rho = col_scale[j] * bj + colj.dot(resid) / n
            az = abs(rho) - thresh
            if az <= 0.0:
                bn = 0.0
            else:
                bn = math.copysign(az, rho) / (col_scale[j] + l2)
            if bn != bj:
                resid += (bj - bn) * colj
                beta[j] = bn
                d = abs(bn - bj)
                if d > maxd:
                    maxd = d
        sweeps += 1
        if maxd < tol:
            return sweeps, maxd, True
    return sweeps, maxd, False
