# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops for the ADMM row solves and one-sided Jacobi sweeps.

The arithmetic order mirrors ``_fallback`` exactly, so the ADMM kernel is
bit-identical to the pure-Python path.
"""
from libc.math cimport fabs, sqrt


def admm_rows(const double[:, ::1] L, const double[:, ::1] rhs_base,
              double[:, ::1] H, double[:, ::1] Ht, double[:, ::1] U,
              double rho, int iters):
    cdef Py_ssize_t n = H.shape[0]
    cdef Py_ssize_t r = H.shape[1]
    cdef Py_ssize_t j, k, l
    cdef int it
    cdef double acc, d
    cdef double[64] x
    if r > 64:
        raise ValueError("compiled ADMM kernel supports rank <= 64")
    with nogil:
        for j in range(n):
            for it in range(iters):
                for k in range(r):
                    acc = rhs_base[j, k] + rho * (Ht[j, k] - U[j, k])
                    for l in range(k):
                        acc = acc - L[k, l] * x[l]
                    x[k] = acc
                for k in range(r):
                    x[k] = x[k] / L[k, k]
                for k in range(r - 1, -1, -1):
                    acc = x[k]
                    for l in range(k + 1, r):
                        acc = acc - L[l, k] * x[l]
                    x[k] = acc
                for k in range(r):
                    H[j, k] = x[k]
                    d = x[k] + U[j, k]
                    if d > 0:
                        Ht[j, k] = d
                    else:
                        Ht[j, k] = 0.0
                    U[j, k] = (U[j, k] + x[k]) - Ht[j, k]


def jacobi_sweeps(double[::1, :] A, double[::1, :] V, double tol, int max_sweeps):
    """Orthogonalize the columns of ``A`` in place; returns sweeps used, -1 if capped."""
    cdef Py_ssize_t m = A.shape[0]
    cdef Py_ssize_t n = A.shape[1]
    cdef Py_ssize_t p, q, i
    cdef int sweep
    cdef bint rotated
    cdef int used = -1
    cdef double alpha, beta, gamma, zeta, t, c, s, ap, aq
    with nogil:
        for sweep in range(max_sweeps):
            rotated = False
            for p in range(n - 1):
                for q in range(p + 1, n):
                    alpha = 0.0
                    beta = 0.0
                    gamma = 0.0
                    for i in range(m):
                        alpha = alpha + A[i, p] * A[i, p]
                        beta = beta + A[i, q] * A[i, q]
                        gamma = gamma + A[i, p] * A[i, q]
                    if alpha == 0.0 or beta == 0.0:
                        continue
                    if fabs(gamma) <= tol * sqrt(alpha * beta):
                        continue
                    rotated = True
                    zeta = (beta - alpha) / (2.0 * gamma)
                    if zeta >= 0:
                        t = 1.0 / (zeta + sqrt(1.0 + zeta * zeta))
                    else:
                        t = -1.0 / (-zeta + sqrt(1.0 + zeta * zeta))
                    c = 1.0 / sqrt(1.0 + t * t)
                    s = c * t
                    for i in range(m):
                        ap = A[i, p]
                        aq = A[i, q]
                        A[i, p] = c * ap - s * aq
                        A[i, q] = s * ap + c * aq
                    for i in range(n):
                        ap = V[i, p]
                        aq = V[i, q]
                        V[i, p] = c * ap - s * aq
                        V[i, q] = s * ap + c * aq
            if not rotated:
                used = sweep + 1
                break
    return used
