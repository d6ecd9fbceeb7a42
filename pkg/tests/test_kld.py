import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pae import kld
from pae.oracles import random_prompts, stab_instance
from pae.tensor_core import Tape, Tensor, finite_diff_grad, rel_error
from pae.tensor_core.errors import ConfigError, ShapeError


def flat(gs):
    return np.concatenate([g.ravel() for g in gs])


def fd_prompts(fn, P):
    shape = P[0].shape
    theta = flat(P)
    return finite_diff_grad(lambda th: fn([Tensor(x) for x in th.reshape(len(P), *shape)]).item(), theta)


def tape_prompts(fn, P):
    leaves = [Tensor(p.copy(), requires_grad=True) for p in P]
    with Tape() as tape:
        out = fn(leaves)
    return flat(tape.backward(out, leaves))


def test_init_system():
    s = kld.init_system(32, 16, seed=0)
    assert s.U.shape == (32, 16) and np.abs(s.U).max() <= np.sqrt(6 / 32)
    assert np.array_equal(s.K, np.eye(16)) and not s.layerwise
    lw = kld.init_system(32, 16, seed=0, layers=4, layerwise=True)
    assert lw.K.shape == (3, 16, 16) and lw.layerwise and len(lw.operators()) == 3
    with pytest.raises(ConfigError):
        kld.init_system(32, 16, seed=0, layerwise=True)


def test_lift_evolve_shapes(rng):
    z = kld.lift(rng.standard_normal((4, 8)), rng.standard_normal((8, 5)))
    assert z.shape == (4, 5)
    assert kld.evolve(z, np.eye(5)).shape == (4, 5)
    with pytest.raises(ShapeError):
        kld.lift(rng.standard_normal((4, 7)), rng.standard_normal((8, 5)))
    with pytest.raises(ShapeError):
        kld.evolve(z, np.eye(4))


def test_kp_zero_for_exact_dynamics(rng):
    U = rng.standard_normal((8, 8))
    K = rng.standard_normal((8, 8)) * 0.3
    Uinv = np.linalg.inv(U)
    P = [rng.standard_normal((3, 8))]
    for _ in range(3):
        P.append(P[-1] @ U @ K @ Uinv)
    assert kld.loss_kp(P, U, K).item() == pytest.approx(0.0, abs=1e-18 + 1e-10)


def test_kp_matches_direct_sum(rng):
    P, U, K = random_prompts(rng), rng.standard_normal((8, 5)), rng.standard_normal((5, 5))
    direct = sum(np.sum((P[i + 1] @ U - P[i] @ U @ K) ** 2) for i in range(3))
    assert kld.loss_kp(P, U, K).item() == pytest.approx(direct, rel=1e-12)


def test_kp_needs_two_layers(rng):
    with pytest.raises(ConfigError):
        kld.loss_kp([rng.standard_normal((3, 8))], np.eye(8), np.eye(8))


@pytest.mark.parametrize("seed", range(20))
def test_grad_kp_analytic(seed):
    rng = np.random.default_rng(seed)
    P = random_prompts(rng)
    U = rng.standard_normal((8, 5)) / np.sqrt(8)
    K = np.eye(5) + 0.3 * rng.standard_normal((5, 5))
    fn = lambda ps: kld.loss_kp(ps, Tensor(U), Tensor(K))
    analytic = flat(kld.grad_kp_analytic(P, U, K))
    assert rel_error(analytic, fd_prompts(fn, P)) <= 1e-6
    assert rel_error(analytic, tape_prompts(fn, P)) <= 1e-10


def test_grad_kp_layerwise(rng):
    P = random_prompts(rng)
    U = rng.standard_normal((8, 5))
    K = np.stack([np.eye(5) + 0.2 * rng.standard_normal((5, 5)) for _ in range(3)])
    fn = lambda ps: kld.loss_kp(ps, Tensor(U), Tensor(K))
    assert rel_error(flat(kld.grad_kp_analytic(P, U, K)), tape_prompts(fn, P)) <= 1e-10


@pytest.mark.parametrize("seed", range(20))
def test_grad_stab_analytic(seed):
    P, U, Q = stab_instance(np.random.default_rng(seed))
    fn = lambda ps: kld.loss_stab([kld.lift(p, Tensor(U)) for p in ps], Tensor(Q))
    analytic = flat(kld.grad_stab_analytic(P, U, Q))
    assert rel_error(analytic, fd_prompts(fn, P)) <= 1e-6
    assert rel_error(analytic, tape_prompts(fn, P)) <= 1e-10


def test_lyapunov_value_is_trace(rng):
    z, A = rng.standard_normal((3, 5)), rng.standard_normal((5, 5))
    Q = A @ A.T
    assert kld.lyapunov_V(z, Q).item() == pytest.approx(np.trace(z @ Q @ z.T), rel=1e-12)


def test_stab_zero_for_decaying_trajectory(rng):
    z0 = rng.standard_normal((3, 4))
    traj = [z0 * 0.9 ** i for i in range(4)]
    assert kld.loss_stab(traj, np.eye(4)).item() == 0.0
    grown = [z0 * 1.1 ** i for i in range(4)]
    assert kld.loss_stab(grown, np.eye(4)).item() > 0.0


@settings(max_examples=1000, deadline=None)
@given(st.integers(2, 6), st.integers(0, 2**32 - 1))
def test_hinge_zero_iff_non_increasing(L, seed):
    rng = np.random.default_rng(seed)
    k = 3
    z = [rng.standard_normal((2, k)) * rng.choice([0.5, 1.0, 1.5]) for _ in range(L)]
    if rng.uniform() < 0.5:  # build a non-increasing trajectory half of the time
        z = sorted(z, key=lambda a: -np.sum(a * a))
    V = [float(np.sum(a * a)) for a in z]
    non_increasing = all(V[i + 1] <= V[i] for i in range(L - 1))
    assert (kld.loss_stab(z, np.eye(k)).item() == 0.0) == non_increasing


@pytest.mark.parametrize("seed", range(5))
def test_spd_floor(seed):
    rng = np.random.default_rng(seed)
    for _ in range(20):
        A = rng.standard_normal((8, 8)) * rng.choice([1e-8, 1.0, 100.0])
        Q = kld.spd_materialize(A, 1e-4).data
        assert np.array_equal(Q, Q.T)
        assert np.linalg.eigvalsh(Q).min() >= 1e-4 - 1e-10


def test_spd_rejects_nonpositive_eps():
    with pytest.raises(ConfigError):
        kld.spd_materialize(np.eye(2), 0.0)


def test_save_load(tmp_path):
    s = kld.init_system(8, 4, seed=3, layers=4, layerwise=True)
    kld.save_system(s, tmp_path)
    back = kld.load_system(tmp_path)
    assert np.array_equal(back.U, s.U) and np.array_equal(back.K, s.K) and back.eps == s.eps
    assert "layerwise=1" in (tmp_path / "koopman.txt").read_text()
