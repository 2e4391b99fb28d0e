"""Learned initialization and learned acceleration around AO-ADMM.

Both models run in one of two modes. Evaluation (``differentiable=False``)
uses the compiled ADMM kernels on plain arrays and returns arrays.
Training (``differentiable=True``) expresses every ADMM step with tape
primitives so the unrolled loss can be differentiated with respect to the
network parameters; the trajectory then holds :class:`Tensor` iterates.

After every network intervention the ADMM auxiliaries are restarted at the
new point (``H_tilde = H``, ``U = 0``); between plain ADMM iterations they
are warm-started.
"""
from __future__ import annotations

import time

import numpy as np

from . import tape as tp
from .admm import AdmmState, SolverConfig, Trajectory, ao_admm, ao_admm_step, rmse
from .factormer import ModelConfig, NFactormerParams, n_factormer, project_nonneg
from .tape import Tensor

__all__ = ["Trajectory", "baseline", "learned_init", "learned_accel", "tape_nnls_admm"]


def tape_nnls_admm(W, V, H_tilde, U, rho, iters):
    """Differentiable version of :func:`graphnmf.admm.nnls_admm`.

    All arguments except ``rho`` and ``iters`` are tensors. Returns the new
    ``(H_tilde, U)``.
    """
    r = W.shape[1]
    gram = tp.add(tp.matmul(tp.transpose(W), W), Tensor(rho * np.eye(r)))
    WtV = tp.matmul(tp.transpose(W), V)
    for _ in range(iters):
        rhs = tp.add(WtV, tp.scale(tp.transpose(tp.subtract(H_tilde, U)), rho))
        H = tp.transpose(tp.spd_solve(gram, rhs))
        H_tilde = tp.relu(tp.add(H, U))
        U = tp.subtract(tp.add(U, H), H_tilde)
    return H_tilde, U


class _KernelSolver:
    """ADMM on arrays through the compiled kernels (no gradients)."""

    def __init__(self, V, cfg: ModelConfig):
        self.V = np.asarray(V, dtype=np.float64)
        self.cfg = SolverConfig(rho=cfg.rho, inner_iters=cfg.inner_iters, outer_iters=cfg.outer_iters)

    def restart(self, W, H):
        self.wstate = AdmmState.warm(W)
        self.hstate = AdmmState.warm(H)

    def step(self, W, H):
        self.hstate, self.wstate = ao_admm_step(self.V, W, self.hstate, self.wstate, self.cfg)
        return self.wstate.H_tilde, self.hstate.H_tilde

    @staticmethod
    def value(X):
        return X


class _TapeSolver:
    """ADMM expressed with tape primitives; optionally detached from the graph."""

    def __init__(self, V, cfg: ModelConfig):
        self.V = V if isinstance(V, Tensor) else Tensor(V)
        self.Vt = tp.transpose(self.V)
        self.rho = cfg.rho
        self.iters = cfg.inner_iters
        self.detach = cfg.detach_solver
        self._kernel = _KernelSolver(self.V.value, cfg) if self.detach else None

    def restart(self, W, H):
        if self.detach:
            self._kernel.restart(W.value, H.value)
            return
        self.w_aux, self.w_dual = W, Tensor(np.zeros(W.shape))
        self.h_aux, self.h_dual = H, Tensor(np.zeros(H.shape))

    def step(self, W, H):
        if self.detach:
            W_new, H_new = self._kernel.step(W.value, H.value)
            return Tensor(W_new), Tensor(H_new)
        self.h_aux, self.h_dual = tape_nnls_admm(W, self.V, self.h_aux, self.h_dual, self.rho, self.iters)
        self.w_aux, self.w_dual = tape_nnls_admm(self.h_aux, self.Vt, self.w_aux, self.w_dual, self.rho, self.iters)
        return self.w_aux, self.h_aux

    @staticmethod
    def value(X):
        return X.value


def _network(W_in, H_in, V, params):
    W, H = n_factormer(W_in, H_in, V, params)
    return project_nonneg(W), project_nonneg(H)


def learned_init(W0, H0, V, params: NFactormerParams, cfg: ModelConfig, differentiable=False) -> Trajectory:
    """Refine ``(W0, H0)`` with one N-Factormer pass, then run ``cfg.outer_iters``
    AO-ADMM iterations. Iterate 0 is the projected network output."""
    if params.r_in != cfg.rank:
        raise ValueError(f"init model expects embedding input {cfg.rank}, params have {params.r_in}")
    V_t = V if isinstance(V, Tensor) else Tensor(V)
    Vv = V_t.value
    solver = _TapeSolver(V_t, cfg) if differentiable else _KernelSolver(Vv, cfg)
    traj = Trajectory()
    start = time.perf_counter()
    W, H = _network(Tensor(W0), Tensor(H0), V_t, params)
    if not differentiable:
        W, H = W.value, H.value
    traj.append(W, H, rmse(solver.value(W), solver.value(H), Vv), time.perf_counter() - start)
    solver.restart(W, H)
    for _ in range(cfg.outer_iters):
        W, H = solver.step(W, H)
        traj.append(W, H, rmse(solver.value(W), solver.value(H), Vv), time.perf_counter() - start)
    return traj


def learned_accel(W0, H0, V, params: NFactormerParams, cfg: ModelConfig, nbr_acc: int,
                  differentiable=False) -> Trajectory:
    """AO-ADMM with the N-Factormer applied after each of the first ``nbr_acc``
    outer iterations. The network sees the previous iterate and the ADMM
    output side by side (``2r`` input columns)."""
    if params.r_in != 2 * cfg.rank:
        raise ValueError(f"accel model expects embedding input {2 * cfg.rank}, params have {params.r_in}")
    if not 0 <= nbr_acc <= cfg.outer_iters:
        raise ValueError(f"nbr_acc={nbr_acc} must be in [0, {cfg.outer_iters}]")
    V_t = V if isinstance(V, Tensor) else Tensor(V)
    Vv = V_t.value
    W = np.maximum(np.asarray(W0, dtype=np.float64), 0.0)
    H = np.maximum(np.asarray(H0, dtype=np.float64), 0.0)
    if differentiable:
        solver = _TapeSolver(V_t, cfg)
        W, H = Tensor(W), Tensor(H)
    else:
        solver = _KernelSolver(Vv, cfg)
    traj = Trajectory()
    start = time.perf_counter()
    traj.append(W, H, rmse(solver.value(W), solver.value(H), Vv), 0.0)
    solver.restart(W, H)
    for t in range(cfg.outer_iters):
        W_hat, H_hat = solver.step(W, H)
        if t < nbr_acc:
            W_in = tp.concat_columns([_t(W), _t(W_hat)])
            H_in = tp.concat_columns([_t(H), _t(H_hat)])
            W, H = _network(W_in, H_in, V_t, params)
            if not differentiable:
                W, H = W.value, H.value
            solver.restart(W, H)
        else:
            W, H = W_hat, H_hat
        traj.append(W, H, rmse(solver.value(W), solver.value(H), Vv), time.perf_counter() - start)
    return traj


def _t(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def baseline(W0, H0, V, cfg: ModelConfig) -> Trajectory:
    """Plain AO-ADMM with the model's iteration counts, for side-by-side runs."""
    return ao_admm(V, W0, H0, SolverConfig(rho=cfg.rho, inner_iters=cfg.inner_iters, outer_iters=cfg.outer_iters))

