import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from ricprobe import Bounds, HalfSpace, SimConfig, Sphere, SphericalCap, simulate, simulate_ensemble, true_bounds
from ricprobe.errors import InvalidBoundError, PreconditionError
from ricprobe.geometry import RadialDrift
from ricprobe.transport import check_Q_bound, evolve_Q, op_norm


def test_sphere_Q_is_scalar_decay():
    S = Sphere(3)
    x = np.array([1.0, 0, 0, 0])
    cfg = SimConfig(0.3, 30, 1)
    p = simulate(S, x, S.default_frame(x), cfg)
    Q = evolve_Q(p)
    # Ric = 2 g on S^3: Q_{0,k} = (1 - 2 dt)^k I
    k = np.arange(31)
    expect = (1 - 2 * cfg.dt) ** k
    assert np.allclose(Q.Q, expect[:, None, None] * np.eye(3), atol=1e-12)


def test_online_and_offline_Q_agree():
    C = SphericalCap(math.pi / 3)
    b = C.boundary_probe(0.0)
    cfg = SimConfig(0.2, 40, 3)
    ens = simulate_ensemble(C, b, C.default_frame(b), cfg, 20, full=True, track_Q=True)
    Q = evolve_Q(ens)
    assert np.allclose(Q.Q[:, -1], ens.Q[:, -1], atol=1e-12)


@pytest.mark.parametrize("M,x", [
    (Sphere(2), np.array([1.0, 0, 0])),
    (SphericalCap(math.pi / 3), SphericalCap(math.pi / 3).boundary_probe(0.0)),
    (HalfSpace(2, RadialDrift("quadratic", -1.0)), np.array([0.0, 0.2])),
])
def test_Q_bound_with_true_norms(M, x):
    ens = simulate_ensemble(M, x, M.default_frame(x), SimConfig(0.3, 30, 8), 300, full=True)
    rep = check_Q_bound(ens, evolve_Q(ens), true_bounds(M, 1e-6))
    assert rep.all_passed
    if M.has_boundary:
        assert rep.n_hits > 0 and rep.annihilation <= 1e-6


def test_Q_bound_detects_too_small_K():
    # Z = +x gives Ric_Z = -1: ||Q|| grows like e^t, so K = 0 is violated
    H = HalfSpace(2, RadialDrift("quadratic", -1.0))
    x = np.array([0.0, 50.0])
    ens = simulate_ensemble(H, x, H.default_frame(x), SimConfig(0.5, 50, 8), 20, full=True)
    rep = check_Q_bound(ens, evolve_Q(ens), Bounds(0.0, 0.0))
    assert not np.any(rep.passed)
    assert np.allclose(op_norm(evolve_Q(ens).Q[:, -1]), (1 + 0.01) ** 50)


def test_evolve_Q_needs_full_path():
    S = Sphere(2)
    x = np.array([1.0, 0, 0])
    ens = simulate_ensemble(S, x, S.default_frame(x), SimConfig(0.1, 5, 1), 4)
    with pytest.raises(PreconditionError):
        evolve_Q(ens)


def test_bounds_validation():
    with pytest.raises(InvalidBoundError):
        Bounds(-1.0, 0.0).k(np.zeros((3, 2)))
    b = Bounds(lambda x: np.ones(x.shape[:-1]), 0.5)
    assert np.allclose(b.scaled(2.0).k(np.zeros((4, 2))), 2.0)
    assert b.describe()["sigma"] == 0.5


@given(st.floats(0, 5), st.floats(0, 5))
def test_constant_bounds_roundtrip(K, s):
    b = Bounds(K, s)
    assert np.allclose(b.k(np.zeros((2, 3))), K) and np.allclose(b.s(np.zeros((2, 3))), s)
