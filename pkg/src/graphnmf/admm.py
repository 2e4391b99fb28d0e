"""Baseline AO-ADMM for the Frobenius NMF problem.

Each factor update is a nonnegative least-squares problem, e.g. for ``H``::

    minimize  0.5 * ||W H^T - V||_F^2   s.t.  H >= 0

solved inexactly by a few ADMM iterations with an auxiliary nonnegative copy
``H_tilde`` and a scaled dual ``U``. The ``W`` update is the same code applied to
``(H, V^T)``.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import _kernels
from .graph_core import DimensionError, as_matrix


class AdmmDivergence(ArithmeticError):
    """Non-finite values appeared during an ADMM solve."""


class SvdConvergenceError(ArithmeticError):
    pass


@dataclass(frozen=True)
class SolverConfig:
    rho: float = 1.0
    inner_iters: int = 5
    outer_iters: int = 50

    def __post_init__(self):
        if not self.rho > 0:
            raise ValueError(f"rho must be positive, got {self.rho}")
        if self.inner_iters < 1:
            raise ValueError(f"inner_iters must be >= 1, got {self.inner_iters}")
        if self.outer_iters < 0:
            raise ValueError(f"outer_iters must be >= 0, got {self.outer_iters}")


@dataclass
class AdmmState:
    """Primal ``H``, auxiliary ``H_tilde >= 0`` and scaled dual ``U`` (all n x r),
    plus the cached packed ``L D L^T`` factor of ``W^T W + rho I``."""

    H: np.ndarray
    H_tilde: np.ndarray
    U: np.ndarray
    gram_ldl: np.ndarray | None = None

    @classmethod
    def warm(cls, H, W=None, rho=1.0):
        """State that starts the solve from ``H``: ``H_tilde = (H)_+`` and ``U = 0``."""
        H = np.array(H, dtype=np.float64)
        state = cls(H.copy(), np.maximum(H, 0.0), np.zeros_like(H))
        if W is not None:
            state.gram_ldl = gram_factor(W, rho)
        return state

    @classmethod
    def zeros(cls, n, r):
        return cls(np.zeros((n, r)), np.zeros((n, r)), np.zeros((n, r)))


@dataclass
class Trajectory:
    """Feasible iterates ``(W_t, H_t)`` with their RMSE and cumulative wall time."""

    W: list = field(default_factory=list)
    H: list = field(default_factory=list)
    rmse: list = field(default_factory=list)
    seconds: list = field(default_factory=list)

    def append(self, W, H, rmse_value, seconds):
        self.W.append(W)
        self.H.append(H)
        self.rmse.append(rmse_value)
        self.seconds.append(seconds)

    def __len__(self):
        return len(self.W)


def loss_frob(W, H, V) -> float:
    """``0.5 * ||W H^T - V||_F^2``."""
    R = np.asarray(W) @ np.asarray(H).T - np.asarray(V)
    return 0.5 * float(np.sum(R * R))


def rmse(W, H, V) -> float:
    """``||W H^T - V||_F / sqrt(m n)``."""
    V = np.asarray(V)
    R = np.asarray(W) @ np.asarray(H).T - V
    return float(np.sqrt(np.sum(R * R) / V.size))


def gram_factor(W, rho=1.0) -> np.ndarray:
    """Root-free factorization ``W^T W + rho I = L D L^T``, packed into one matrix.

    The strict lower triangle holds the unit-lower ``L``; the diagonal holds ``D``.
    Avoiding square roots keeps small integer systems exact.
    """
    W = np.asarray(W, dtype=np.float64)
    G = W.T @ W
    G[np.diag_indices_from(G)] += rho
    r = G.shape[0]
    F = np.zeros_like(G)
    for j in range(r):
        Lj = F[j, :j]
        F[j, j] = G[j, j] - np.dot(Lj * Lj, np.diag(F)[:j])
        if not F[j, j] > 0:
            raise AdmmDivergence("Gram matrix is not positive definite")
        for i in range(j + 1, r):
            F[i, j] = (G[i, j] - np.dot(F[i, :j] * Lj, np.diag(F)[:j])) / F[j, j]
    return F


def nnls_admm(W, V, state: AdmmState, cfg: SolverConfig) -> AdmmState:
    """Run ``cfg.inner_iters`` ADMM iterations for ``min_{H >= 0} 0.5||W H^T - V||^2``.

    One iteration is::

        H       <- (W^T W + rho I)^{-1} (W^T V + rho (H_tilde - U))
        H_tilde <- (H + U)_+
        U       <- U + H - H_tilde

    The input state is not modified. If ``state.gram_ldl`` is None it is
    computed from ``W``; otherwise it must already correspond to ``W`` and
    ``cfg.rho``.
    """
    W = np.asarray(W, dtype=np.float64)
    V = np.asarray(V, dtype=np.float64)
    m, r = W.shape
    if V.shape[0] != m:
        raise DimensionError(f"W is {W.shape} but V is {V.shape}")
    n = V.shape[1]
    for name in ("H", "H_tilde", "U"):
        if getattr(state, name).shape != (n, r):
            raise DimensionError(f"state.{name} has shape {getattr(state, name).shape}, expected {(n, r)}")
    L = state.gram_ldl if state.gram_ldl is not None else gram_factor(W, cfg.rho)
    L = np.ascontiguousarray(L)
    rhs = np.ascontiguousarray(V.T @ W)
    H = np.array(state.H, order="C")
    Ht = np.array(state.H_tilde, order="C")
    U = np.array(state.U, order="C")
    _kernels.admm_rows(L, rhs, H, Ht, U, float(cfg.rho), int(cfg.inner_iters))
    if not (np.isfinite(H).all() and np.isfinite(U).all()):
        raise AdmmDivergence("non-finite iterate in nonnegative least-squares ADMM")
    return AdmmState(H, Ht, U, L)


def ao_admm_step(V, W, hstate: AdmmState, wstate: AdmmState, cfg: SolverConfig):
    """One outer iteration: H-update with ``V`` then W-update with ``V^T``.

    ``W`` is the current feasible W iterate. Returns the new states; the new
    feasible iterates are ``wstate.H_tilde`` and ``hstate.H_tilde``.
    """
    hstate = nnls_admm(W, V, replace(hstate, gram_ldl=gram_factor(W, cfg.rho)), cfg)
    H = hstate.H_tilde
    wstate = nnls_admm(H, V.T, replace(wstate, gram_ldl=gram_factor(H, cfg.rho)), cfg)
    return hstate, wstate


def ao_admm(V, W_init, H_init, cfg: SolverConfig) -> Trajectory:
    """Alternating ADMM from ``(W_init, H_init)`` for ``cfg.outer_iters`` iterations.

    Auxiliary variables start at the projected initial factors and duals at
    zero; both are warm-started across outer iterations. Iterate 0 of the
    returned trajectory is the projected initial point.
    """
    V = as_matrix(V, "V")
    W = np.maximum(as_matrix(W_init, "W_init"), 0.0)
    H = np.maximum(as_matrix(H_init, "H_init"), 0.0)
    if W.shape[0] != V.shape[0] or H.shape[0] != V.shape[1] or W.shape[1] != H.shape[1]:
        raise DimensionError(f"V is {V.shape} but W is {W.shape} and H is {H.shape}")
    traj = Trajectory()
    start = time.perf_counter()
    traj.append(W, H, rmse(W, H, V), 0.0)
    hstate = AdmmState.warm(H)
    wstate = AdmmState.warm(W)
    for _ in range(cfg.outer_iters):
        hstate, wstate = ao_admm_step(V, wstate.H_tilde, hstate, wstate, cfg)
        W, H = wstate.H_tilde, hstate.H_tilde
        traj.append(W, H, rmse(W, H, V), time.perf_counter() - start)
    return traj


def jacobi_svd(A, tol=1e-12, max_sweeps=100):
    """Thin SVD by one-sided Jacobi rotations.

    Returns ``U (m x k)``, ``s (k,)`` descending and ``Vt (k x n)`` with
    ``k = min(m, n)``.
    """
    A = np.asarray(A, dtype=np.float64)
    if A.shape[0] < A.shape[1]:
        U, s, Vt = jacobi_svd(A.T, tol, max_sweeps)
        return Vt.T, s, U.T
    n = A.shape[1]
    B = np.asfortranarray(A.copy())
    Q = np.asfortranarray(np.eye(n))
    sweeps = _kernels.jacobi_sweeps(B, Q, float(tol), int(max_sweeps))
    if sweeps < 0:
        raise SvdConvergenceError(
            f"one-sided Jacobi did not converge in {max_sweeps} sweeps (tol={tol})"
        )
    s = np.sqrt(np.sum(B * B, axis=0))
    order = np.argsort(-s, kind="stable")
    s = s[order]
    B = B[:, order]
    Q = Q[:, order]
    U = np.zeros_like(B)
    nz = s > 0
    U[:, nz] = B[:, nz] / s[nz]
    return U, s, np.ascontiguousarray(Q.T)


def nndsvd_init(V, r):
    """Nonnegative double SVD initialization (plain variant, zeros kept).

    Returns ``W0 (m x r)`` and ``H0 (n x r)``, both nonnegative. Small negative
    entries in ``V`` are clamped to zero for this computation only.
    """
    V = np.maximum(as_matrix(V, "V"), 0.0)
    m, n = V.shape
    if not 1 <= r <= min(m, n):
        raise ValueError(f"rank {r} must be in [1, min(m, n)={min(m, n)}]")
    with np.errstate(over="ignore", invalid="ignore"):
        U, s, Vt = jacobi_svd(V)
    if not np.all(np.isfinite(s)):
        raise AdmmDivergence("singular values overflow; rescale the input")
    W = np.zeros((m, r))
    H = np.zeros((n, r))
    W[:, 0] = np.sqrt(s[0]) * np.abs(U[:, 0])
    H[:, 0] = np.sqrt(s[0]) * np.abs(Vt[0])
    for c in range(1, r):
        x, y = U[:, c], Vt[c]
        xp, yp = np.maximum(x, 0.0), np.maximum(y, 0.0)
        xn, yn = np.maximum(-x, 0.0), np.maximum(-y, 0.0)
        xpn, ypn = np.linalg.norm(xp), np.linalg.norm(yp)
        xnn, ynn = np.linalg.norm(xn), np.linalg.norm(yn)
        pos, neg = xpn * ypn, xnn * ynn
        if pos > neg:
            u, v, sigma = xp / xpn, yp / ypn, pos
        elif neg > 0:
            u, v, sigma = xn / xnn, yn / ynn, neg
        else:
            continue
        scale = np.sqrt(s[c] * sigma)
        W[:, c] = scale * u
        H[:, c] = scale * v
    return W, H
