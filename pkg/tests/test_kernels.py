"""The compiled kernels and the pure-Python fallback must agree."""
import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from graphnmf import _kernels
from graphnmf.admm import gram_factor
from graphnmf._kernels import _fallback

compiled = pytest.importorskip("graphnmf._kernels._ckernels", reason="compiled extension not built")


def _admm_inputs(seed, n, r):
    rng = np.random.default_rng(seed)
    W = rng.random((n + 2, r))
    L = gram_factor(W, 1.0)
    rhs = rng.standard_normal((n, r))
    H, Ht, U = rng.standard_normal((n, r)), np.abs(rng.standard_normal((n, r))), rng.standard_normal((n, r))
    return L, rhs, H, Ht, U


@given(st.integers(0, 2**31 - 1), st.integers(1, 12), st.integers(1, 8), st.integers(1, 6))
def test_admm_rows_bit_identical(seed, n, r, iters):
    args = _admm_inputs(seed, n, r)
    a = [x.copy() for x in args]
    b = [x.copy() for x in args]
    compiled.admm_rows(*a, 1.0, iters)
    _fallback.admm_rows(*b, 1.0, iters)
    for x, y in zip(a[2:], b[2:]):
        assert np.array_equal(x, y)


@given(st.integers(0, 2**31 - 1), st.integers(1, 8), st.integers(1, 8))
def test_jacobi_sweeps_agree(seed, m, n):
    if m < n:
        m, n = n, m
    A = np.random.default_rng(seed).standard_normal((m, n))
    A1, A2 = np.asfortranarray(A.copy()), np.asfortranarray(A.copy())
    V1, V2 = np.asfortranarray(np.eye(n)), np.asfortranarray(np.eye(n))
    s1 = compiled.jacobi_sweeps(A1, V1, 1e-12, 100)
    s2 = _fallback.jacobi_sweeps(A2, V2, 1e-12, 100)
    assert s1 == s2
    np.testing.assert_allclose(A1, A2, atol=1e-12)
    np.testing.assert_allclose(V1, V2, atol=1e-12)


def test_backend_selected():
    assert _kernels.BACKEND == "cython"


def test_pure_python_env_selects_fallback():
    code = "import graphnmf; print(graphnmf.BACKEND)"
    env = dict(os.environ, GRAPHNMF_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"


def test_solver_results_identical_across_backends(monkeypatch):
    from graphnmf import admm

    rng = np.random.default_rng(3)
    V = rng.random((9, 7))
    W0, H0 = admm.nndsvd_init(V, 3)
    cfg = admm.SolverConfig(outer_iters=20)
    fast = admm.ao_admm(V, W0, H0, cfg)
    monkeypatch.setattr(_kernels, "admm_rows", _fallback.admm_rows)
    slow = admm.ao_admm(V, W0, H0, cfg)
    assert fast.rmse == slow.rmse
    assert np.array_equal(fast.W[-1], slow.W[-1])
