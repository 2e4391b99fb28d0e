"""Finite-difference checks of the differentiable pipeline.

Each case builds a small random problem, forms a scalar loss and compares
reverse-mode gradients with central differences for every parameter. The
reported error is the worst elementwise ``|g_ad - g_fd| / (|g_fd| + 1e-8)``.
"""
from __future__ import annotations

import numpy as np

from . import tape as tp
from .admm import nndsvd_init
from .factormer import FactormerParams, ModelConfig, factormer, init_params, n_factormer
from .models import learned_init
from .tape import Tensor
from .training import discounted_loss

# Deep composites accumulate ~1e-15 absolute forward roundoff, which a 1e-6
# step turns into ~1e-10 gradient error; 1e-4 stays clear of most relu kinks.
STEP = 1e-4


def _perturb(params, rng, scale=0.1):
    # Moves biases and gains off their structured initial values.
    for t in params:
        t.value += scale * rng.standard_normal(t.shape)


def directional_check(f, tensors, seed=0, step=1e-5):
    """Relative error of the derivative of ``f`` along one random direction.

    Compares ``sum(g_ad * d)`` with a central difference of ``f`` along ``d``,
    which stays well conditioned when individual gradient entries are tiny.
    """
    rng = np.random.default_rng(seed)
    dirs = [rng.standard_normal(t.shape) for t in tensors]
    saved = [t.requires_grad for t in tensors]
    for t in tensors:
        t.requires_grad = True
    try:
        with tp.Tape() as tape:
            out = f(None)
        grads = tp.backward(tape, out)
        exact = sum(float(np.sum(grads.get(t, 0.0) * d)) for t, d in zip(tensors, dirs))
        base = [t.value.copy() for t in tensors]
        values = []
        for sign in (1.0, -1.0):
            for t, b, d in zip(tensors, base, dirs):
                t.value[...] = b + sign * step * d
            values.append(float(f(None).value))
        for t, b in zip(tensors, base):
            t.value[...] = b
    finally:
        for t, s in zip(tensors, saved):
            t.requires_grad = s
    approx = (values[0] - values[1]) / (2 * step)
    return abs(exact - approx) / max(abs(approx), 1e-12)


def build_factormer(seed=0, d=8, n_heads=2, m=5, n=4):
    rng = np.random.default_rng([seed, 1])
    p = FactormerParams.init(d, 2 * d, rng)
    tensors = [t for _, t in p.named()]
    _perturb(tensors, rng)
    src = Tensor(rng.standard_normal((m, d)), name="src")
    tgt = Tensor(rng.standard_normal((n, d)), name="tgt")
    E = Tensor(rng.random((m, n)), name="edges")
    probe = Tensor(rng.standard_normal((n, d)))

    def f(_):
        return tp.tsum(tp.multiply(factormer(src, tgt, E, p, n_heads), probe))

    return f, tensors + [src, tgt, E]


def build_n_factormer(seed=0, d=8, n_heads=2, m=5, n=4, r=2):
    rng = np.random.default_rng([seed, 2])
    cfg = ModelConfig(rank=r, hidden=d, n_heads=n_heads, n_layers=1)
    params = init_params(cfg, "init", seed)
    tensors = params.parameters()
    _perturb(tensors, rng)
    W = Tensor(rng.random((m, r)))
    H = Tensor(rng.random((n, r)))
    V = Tensor(rng.random((m, n)))
    pw = Tensor(rng.standard_normal((m, r)))
    ph = Tensor(rng.standard_normal((n, r)))

    def f(_):
        Wo, Ho = n_factormer(W, H, V, params)
        return tp.add(tp.tsum(tp.multiply(Wo, pw)), tp.tsum(tp.multiply(Ho, ph)))

    return f, tensors + [W, H, V]


def build_learned_init(seed=0, d=8, n_heads=2, m=5, n=4, r=2, outer=2, inner=2):
    rng = np.random.default_rng([seed, 3])
    cfg = ModelConfig(rank=r, hidden=d, n_heads=n_heads, n_layers=1, outer_iters=outer, inner_iters=inner)
    params = init_params(cfg, "init", seed)
    tensors = params.parameters()
    _perturb(tensors, rng)
    Wt = rng.random((m, r))
    Ht = rng.random((n, r))
    V = Wt @ Ht.T + 0.1 * rng.random((m, n))
    W0, H0 = nndsvd_init(V, r)

    def f(_):
        traj = learned_init(W0, H0, V, params, cfg, differentiable=True)
        return discounted_loss(traj, V, cfg.gamma)

    return f, tensors


CASES = {
    "factormer": build_factormer,
    "n_factormer": build_n_factormer,
    "learned_init": build_learned_init,
}


def check(name, seed=0, step=STEP) -> float:
    """Worst elementwise relative error over every tensor of case ``name``."""
    f, tensors = CASES[name](seed)
    return max(tp.finite_diff_check(f, t, step) for t in tensors)


def run_suite(seed=0, step=STEP) -> dict[str, float]:
    return {name: check(name, seed, step) for name in CASES}
