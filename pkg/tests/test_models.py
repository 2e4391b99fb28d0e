import numpy as np
import pytest

from graphnmf import tape as tp
from graphnmf.admm import SolverConfig, ao_admm, nndsvd_init
from graphnmf.data import SyntheticSpec, synthetic_matrix
from graphnmf.factormer import FactormerParams, ModelConfig, init_params, n_factormer, project_nonneg
from graphnmf.models import baseline, learned_accel, learned_init
from graphnmf.tape import Tensor
from graphnmf.training import discounted_loss

CFG = ModelConfig(rank=3, hidden=8, n_heads=2, n_layers=1, outer_iters=4, inner_iters=3)


def _problem(seed, m=9, n=7, r=3):
    V = synthetic_matrix(SyntheticSpec(1, (m, m), (n, n), r, seed=seed), 0, 0)
    V = V / V.mean()
    W0, H0 = nndsvd_init(V, r)
    return V, W0, H0


def _zero_network(cfg, kind):
    params = init_params(cfg, kind, seed=0)
    for layer in params.layers:
        for name, t in layer.named():
            t.value[...] = 1.0 if name.endswith("_g") else 0.0
    return params


def _perturbed(cfg, kind, seed):
    params = init_params(cfg, kind, seed)
    rng = np.random.default_rng(seed + 100)
    for t in params.parameters():
        t.value += 0.1 * rng.standard_normal(t.shape)
    return params


# -- learned_init -------------------------------------------------------------

def test_zero_network_init_then_baseline():
    V, W0, H0 = _problem(0)
    params = _zero_network(CFG, "init")
    traj = learned_init(W0, H0, V, params, CFG)
    Wn, Hn = n_factormer(W0, H0, V, params)
    assert np.array_equal(traj.W[0], project_nonneg(Wn).value)
    assert np.array_equal(traj.H[0], project_nonneg(Hn).value)
    assert len(traj) == CFG.outer_iters + 1 and all(np.isfinite(traj.rmse))
    ref = ao_admm(V, traj.W[0], traj.H[0], SolverConfig(CFG.rho, CFG.inner_iters, CFG.outer_iters))
    for a, b in zip(traj.W[1:], ref.W[1:]):
        assert np.abs(a - b).max() <= 1e-12


def _identity_network(r):
    cfg = ModelConfig(rank=r, hidden=r, n_heads=1, n_layers=0, outer_iters=5, inner_iters=5)
    params = init_params(cfg, "init")
    params.embed_w.value[...] = np.eye(r)
    params.extract_w.value[...] = np.eye(r)
    params.extract_b.value[...] = 0.0
    return cfg, params


def test_admm_after_identity_network_does_not_worsen():
    cfg, params = _identity_network(3)
    ratios = []
    for seed in range(50):
        rng = np.random.default_rng(seed)
        V = rng.random((8, 3)) @ rng.random((6, 3)).T
        W0, H0 = nndsvd_init(V, 3)
        traj = learned_init(W0, H0, V, params, cfg)
        assert np.array_equal(traj.W[0], W0)
        ratios.append(traj.rmse[-1] / traj.rmse[0])
    assert np.median(ratios) <= 1.0


def test_init_rejects_accel_params():
    V, W0, H0 = _problem(0)
    with pytest.raises(ValueError):
        learned_init(W0, H0, V, init_params(CFG, "accel"), CFG)


# -- learned_accel ------------------------------------------------------------

@pytest.mark.parametrize("seed", range(5))
def test_bypass_matches_baseline(seed):
    V, W0, H0 = _problem(seed)
    traj = learned_accel(W0, H0, V, _perturbed(CFG, "accel", seed), CFG, nbr_acc=0)
    ref = baseline(W0, H0, V, CFG)
    assert len(traj) == len(ref)
    for a, b in zip(traj.W + traj.H, ref.W + ref.H):
        assert np.abs(a - b).max() <= 1e-12


def test_zero_network_full_acceleration_is_feasible():
    V, W0, H0 = _problem(1)
    traj = learned_accel(W0, H0, V, _zero_network(CFG, "accel"), CFG, nbr_acc=CFG.outer_iters)
    assert all(np.isfinite(traj.rmse))
    assert all((W >= 0).all() and (H >= 0).all() for W, H in zip(traj.W, traj.H))


def test_accel_validation():
    V, W0, H0 = _problem(0)
    with pytest.raises(ValueError):
        learned_accel(W0, H0, V, init_params(CFG, "init"), CFG, 1)
    with pytest.raises(ValueError):
        learned_accel(W0, H0, V, init_params(CFG, "accel"), CFG, CFG.outer_iters + 1)


# -- shared properties --------------------------------------------------------

def _run(kind, params, V, W0, H0, differentiable=False, cfg=CFG):
    if kind == "init":
        return learned_init(W0, H0, V, params, cfg, differentiable)
    return learned_accel(W0, H0, V, params, cfg, 2, differentiable)


@pytest.mark.parametrize("kind", ["init", "accel"])
@pytest.mark.parametrize("seed", range(4))
def test_every_iterate_feasible(kind, seed):
    V, W0, H0 = _problem(seed)
    traj = _run(kind, _perturbed(CFG, kind, seed), V, W0, H0)
    assert all((W >= 0).all() and (H >= 0).all() for W, H in zip(traj.W, traj.H))
    assert len(traj) == CFG.outer_iters + 1


@pytest.mark.parametrize("kind", ["init", "accel"])
def test_deterministic(kind):
    V, W0, H0 = _problem(2)
    params = _perturbed(CFG, kind, 2)
    a, b = _run(kind, params, V, W0, H0), _run(kind, params, V, W0, H0)
    assert a.rmse == b.rmse
    assert all(np.array_equal(x, y) for x, y in zip(a.W + a.H, b.W + b.H))


@pytest.mark.parametrize("kind", ["init", "accel"])
def test_tape_path_matches_kernel_path(kind):
    V, W0, H0 = _problem(3)
    params = _perturbed(CFG, kind, 3)
    fast = _run(kind, params, V, W0, H0)
    with tp.Tape():
        slow = _run(kind, params, V, W0, H0, differentiable=True)
    for a, b in zip(fast.W + fast.H, slow.W + slow.H):
        np.testing.assert_allclose(b.value, a, rtol=1e-9, atol=1e-12)
    np.testing.assert_allclose(slow.rmse, fast.rmse, rtol=1e-9)


def test_detached_solver_blocks_gradient_through_admm():
    V, W0, H0 = _problem(4)
    full_cfg = CFG
    det_cfg = ModelConfig(**{**CFG.to_dict(), "detach_solver": True})
    params = _perturbed(CFG, "init", 4)

    def grads(cfg, gamma):
        with tp.Tape() as t:
            traj = learned_init(W0, H0, V, params, cfg, differentiable=True)
            loss = discounted_loss(traj, V, gamma)
        return traj, tp.backward(t, loss)

    traj, g_det = grads(det_cfg, 0.5)
    assert not any(W.requires_grad for W in traj.W[1:])
    # Only iterate 0 carries gradient: it matches the loss on iterate 0 alone.
    with tp.Tape() as t:
        W, H = (project_nonneg(x) for x in n_factormer(W0, H0, V, params))
        R = tp.subtract(tp.matmul(W, tp.transpose(H)), Tensor(V))
        only0 = tp.scale(tp.tsum(tp.multiply(R, R)), 0.5 * 0.5 ** CFG.outer_iters)
    g0 = tp.backward(t, only0)
    for p in params.parameters():
        np.testing.assert_allclose(g_det.get(p, 0.0), g0.get(p, 0.0), rtol=1e-10, atol=1e-14)
    _, g_full = grads(full_cfg, 0.5)
    assert any(not np.allclose(g_full[p], g_det[p]) for p in params.parameters() if p in g_det)


def test_zero_layer_params_are_plain_factormer_layers():
    layer = _zero_network(CFG, "init").layers[0]
    assert isinstance(layer, FactormerParams)
