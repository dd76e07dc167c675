import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from ricprobe import HalfSpace, SimConfig, Sphere, SphericalCap, simulate, simulate_ensemble, step
from ricprobe.diffusion import ensemble_keys, simulate_coupled
from ricprobe.errors import DiscardBudgetError, PreconditionError


def _north():
    return np.array([0.0, 0.0, 1.0])


def test_simconfig_grid_and_knots():
    cfg = SimConfig(0.5, 50, 1)
    assert cfg.dt == 0.01 and len(cfg.grid) == 51
    assert cfg.knot(0.25) == 25
    with pytest.raises(PreconditionError):
        cfg.knot(0.255)
    with pytest.raises(PreconditionError):
        SimConfig(0.0, 10, 1)


def test_ensemble_independent_of_worker_count():
    S = Sphere(2)
    x = _north()
    cfg = SimConfig(0.2, 20, 5)
    a = simulate_ensemble(S, x, S.default_frame(x), cfg, 9000, workers=1)
    b = simulate_ensemble(S, x, S.default_frame(x), cfg, 9000, workers=3)
    assert np.array_equal(a.X, b.X) and np.array_equal(a.U, b.U)


def test_path_i_does_not_depend_on_ensemble_size():
    S = Sphere(2)
    x = _north()
    cfg = SimConfig(0.1, 10, 9)
    big = simulate_ensemble(S, x, S.default_frame(x), cfg, 50)
    one = simulate(S, x, S.default_frame(x), cfg, path_index=17)
    assert np.allclose(big.X[17, -1], one.X[-1], atol=0, rtol=0)


def test_antithetic_pairs_mirror_increments():
    keys, signs = ensemble_keys(3, 6, antithetic=True)
    assert keys[0] == keys[1] and keys[2] == keys[3]
    assert list(signs) == [1, -1, 1, -1, 1, -1]
    H = HalfSpace(2)
    x = np.array([0.0, 10.0])
    cfg = SimConfig(0.01, 1, 3)
    ens = simulate_ensemble(H, x, H.default_frame(x), cfg, 4, antithetic=True)
    assert np.allclose(ens.X[0, -1] - x, -(ens.X[1, -1] - x))


def test_frames_stay_orthonormal_on_cap():
    C = SphericalCap(math.pi / 3)
    b = C.boundary_probe(0.0)
    p = simulate(C, b, C.default_frame(b), SimConfig(0.2, 40, 2))
    G = np.einsum("kin,kjn->kij", p.U, p.U)
    assert np.allclose(G, np.eye(2), atol=1e-8)
    assert np.all(C.residual(p.X) <= 1e-10)
    assert p.l[-1] > 0 and np.all(np.diff(p.l) >= 0)


@given(st.integers(0, 2**32), st.integers(1, 60))
def test_one_dimensional_skorokhod_identity(seed, n):
    """X_n = sqrt(2) W_n + l_n pathwise in the half line, with l nondecreasing."""
    H = HalfSpace(1)
    x = np.array([0.0])
    cfg = SimConfig(0.01 * n, n, seed)
    p = simulate(H, x, H.default_frame(x), cfg)
    W = np.concatenate([[0.0], np.cumsum(p.dW[:, 0])])
    assert np.allclose(p.X[:, 0], math.sqrt(2) * W + p.l, atol=1e-12)
    assert np.all(p.X[:, 0] >= 0) and np.all(np.diff(p.l) >= 0)
    # l only grows on steps that would have left the half line
    grew = np.diff(p.l) > 0
    assert np.all(p.X[:-1, 0][grew] + math.sqrt(2) * p.dW[grew, 0] < 0)


def test_step_function_matches_engine():
    S = Sphere(2)
    x = _north()
    U = S.default_frame(x)
    y, U2, dl = step(S, (x, U, 0.0), 0.01, np.array([0.1, -0.2]))
    assert abs(np.linalg.norm(y) - 1) < 1e-12 and dl == 0.0
    with pytest.raises(PreconditionError):
        step(S, (x, U, 0.0), 0.01, np.array([np.nan, 0.0]))


def test_coupled_paths_share_noise():
    H = HalfSpace(2)
    x1, x2 = np.array([0.0, 3.0]), np.array([0.5, 3.0])
    p1, p2 = simulate_coupled(H, x1, x2, (np.eye(2), np.eye(2)), SimConfig(0.1, 10, 4))
    assert np.allclose(p1.X - x1, p2.X - x2)


def test_discard_budget_raises():
    S = Sphere(2)
    x = _north()
    ens = simulate_ensemble(S, x, S.default_frame(x), SimConfig(0.1, 5, 1), 100)
    ens.discarded[:5] = True
    with pytest.raises(DiscardBudgetError):
        ens.check_discards()


def test_invalid_start_rejected():
    S = Sphere(2)
    with pytest.raises(PreconditionError):
        simulate_ensemble(S, np.array([1.0, 1.0, 0.0]), np.eye(3)[:2], SimConfig(0.1, 5, 1), 10)
