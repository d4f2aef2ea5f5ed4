# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled coordinate-descent sweep kernel.

Mirrors _cd_py.enet_sweeps: cyclic order, identical update arithmetic,
identical convergence rule.
"""

from libc.math cimport fabs, copysign

BACKEND_NAME = "compiled"


def enet_sweeps(double[::1, :] X, double[::1] resid, double[::1] beta,
                double[::1] col_scale, double thresh, double l2,
                double tol, long max_sweeps):
    cdef Py_ssize_t n = X.shape[0]
    cdef Py_ssize_t p = X.shape[1]
    cdef Py_ssize_t i, j
    cdef long sweep, sweeps = 0
    cdef double bj, bn, rho, s, d, az
    cdef double dn = <double> n
    cdef double maxd = 0.0

    for sweep in range(max_sweeps):
        maxd = 0.0
        for j in range(p):
            bj = beta[j]
            s = 0.0
            for i in range(n):
                s += X[i, j] * resid[i]
            rho = col_scale[j] * bj + s / dn
            az = fabs(rho) - thresh
            if az <= 0.0:
                bn = 0.0
            else:
                bn = copysign(az, rho) / (col_scale[j] + l2)
            if bn != bj:
                d = bj - bn
                for i in range(n):
                    resid[i] += d * X[i, j]
                beta[j] = bn
                d = fabs(d)
                if d > maxd:
                    maxd = d
        sweeps += 1
        if maxd < tol:
            return sweeps, maxd, True
    return sweeps, maxd, False
