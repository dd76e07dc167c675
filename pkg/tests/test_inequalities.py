import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from ricprobe import Bounds, HalfSpace, RadialDrift, Sphere
from ricprobe.errors import PreconditionError
from ricprobe.estimators import RunParams, sphere_coordinate, windowed_coordinate
from ricprobe.inequalities import (
    FAIL,
    INCONCLUSIVE,
    PASS,
    check_gradient_ineq_1,
    check_gradient_ineq_2,
    check_pathspace_gradient,
    check_poincare,
    verdict,
)
from ricprobe.pathspace import sphere_linear_functional, sphere_product_functional

EQ = np.array([1.0, 0.0, 0.0])
P = RunParams(n_paths=4000, n_steps=20, seed=11)


@given(st.floats(-10, 10), st.floats(1e-6, 5))
def test_verdict_partition(m, c):
    v = verdict(m, c)
    if m >= -2 * c:
        assert v == PASS
    elif m < -3 * c:
        assert v == FAIL
    else:
        assert v == INCONCLUSIVE


@given(st.floats(-10, 10), st.floats(1e-6, 5), st.floats(0, 5))
def test_verdict_monotone_in_margin(m, c, dm):
    order = {FAIL: 0, INCONCLUSIVE: 1, PASS: 2}
    assert order[verdict(m + dm, c)] >= order[verdict(m, c)]


def test_gradient_inequalities_pass_on_sphere():
    S = Sphere(2)
    tf = sphere_coordinate(S, EQ, 2)
    b = Bounds(1.0, 0.0)
    r1 = check_gradient_ineq_1(S, EQ, tf, 0.2, 2, b, P)
    r2 = check_gradient_ineq_2(S, EQ, tf, 0.2, 1.5, b, P)
    assert r1.verdict == PASS and r2.verdict == PASS
    # |grad P_T z|^2 = e^{-4T} at the equator
    assert abs(r1.lhs.value - math.exp(-0.8)) < 3 * r1.lhs.ci
    with pytest.raises(PreconditionError):
        check_gradient_ineq_1(S, EQ, tf, 0.2, 3, b, P)


def test_rhs_monotone_in_K():
    S = Sphere(2)
    tf = sphere_coordinate(S, EQ, 2)
    rhs = [check_gradient_ineq_1(S, EQ, tf, 0.2, 2, Bounds(K, 0.0), P).rhs.value for K in (0.0, 1.0, 2.0)]
    assert rhs[0] < rhs[1] < rhs[2]


def test_too_small_K_fails():
    # Z = +(y - c) makes Ric_Z = -1; K = 0 underestimates the damping growth
    H = HalfSpace(2, RadialDrift("quadratic", -1.0, center=(0.0, 5.0)))
    x = np.array([0.0, 5.0])
    tf = windowed_coordinate(H, x, 0)
    q = P.with_(n_steps=40, n_paths=20000)
    bad = check_gradient_ineq_1(H, x, tf, 0.2, 2, Bounds(0.0, 0.0), q, negative_control=True)
    good = check_gradient_ineq_1(H, x, tf, 0.2, 2, Bounds(1.0, 0.0), q)
    assert bad.verdict == FAIL and bad.negative_control
    assert good.verdict == PASS


def test_pathspace_and_poincare_on_sphere():
    S = Sphere(2)
    b = Bounds(1.0, 0.0)
    F = sphere_product_functional(0.1, 0.2, 0, 2)
    r = check_pathspace_gradient(S, EQ, F, 0.2, 2, b, P.with_(n_steps=40))
    assert r.verdict == PASS
    L = sphere_linear_functional(2, (0.01, 0.2), (1.0, -0.5), axis=0)
    rp = check_poincare(S, EQ, L, 0.01, 0.2, b, P.with_(n_steps=160), n_nodes=5)
    assert rp.verdict == PASS
    d = rp.to_dict()
    assert set(d) >= {"lhs", "rhs", "margin", "margin_ci", "verdict"}
