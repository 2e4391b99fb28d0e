"""Pure-numpy versions of the compiled kernels.

``admm_rows`` vectorizes over rows but performs the same scalar operations in
the same order as the compiled loop, so both backends agree bit for bit.
"""
import numpy as np


def admm_rows(L, rhs_base, H, Ht, U, rho, iters):
    # L packs a root-free factorization: unit-lower multipliers below the diagonal, D on it.
    r = H.shape[1]
    x = np.empty_like(H)
    for _ in range(iters):
        for k in range(r):
            acc = rhs_base[:, k] + rho * (Ht[:, k] - U[:, k])
            for l in range(k):
                acc = acc - L[k, l] * x[:, l]
            x[:, k] = acc
        for k in range(r):
            x[:, k] = x[:, k] / L[k, k]
        for k in range(r - 1, -1, -1):
            acc = x[:, k]
            for l in range(k + 1, r):
                acc = acc - L[l, k] * x[:, l]
            x[:, k] = acc
        H[...] = x
        d = x + U
        Ht[...] = np.where(d > 0, d, 0.0)
        U[...] = (U + x) - Ht


def jacobi_sweeps(A, V, tol, max_sweeps):
    """Orthogonalize the columns of ``A`` in place; returns sweeps used, -1 if capped."""
    n = A.shape[1]
    for sweep in range(max_sweeps):
        rotated = False
        for p in range(n - 1):
            for q in range(p + 1, n):
                ap = A[:, p]
                aq = A[:, q]
                alpha = ap @ ap
                beta = aq @ aq
                gamma = ap @ aq
                if alpha == 0.0 or beta == 0.0:
                    continue
                if abs(gamma) <= tol * np.sqrt(alpha * beta):
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                if zeta >= 0:
                    t = 1.0 / (zeta + np.sqrt(1.0 + zeta * zeta))
                else:
                    t = -1.0 / (-zeta + np.sqrt(1.0 + zeta * zeta))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                A[:, [p, q]] = np.column_stack((c * ap - s * aq, s * ap + c * aq))
                vp = V[:, p].copy()
                vq = V[:, q].copy()
                V[:, p] = c * vp - s * vq
                V[:, q] = s * vp + c * vq
        if not rotated:
            return sweep + 1
    return -1
