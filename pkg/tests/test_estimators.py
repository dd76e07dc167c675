import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from ricprobe import HalfSpace, SimConfig, Sphere, SphericalCap, simulate_ensemble
from ricprobe.errors import FitError, PreconditionError
from ricprobe.estimators import (
    DEFAULT_SCHEDULE,
    RunParams,
    _norm_p_stats,
    chart_linear,
    curvature_terms,
    fit_limit,
    grad_pt_f_bismut,
    grad_pt_f_fd,
    gradient_agreement,
    integrability_diagnostic,
    keep_mask,
    mean_estimate,
    pt_f,
    sphere_coordinate,
    variance_short_time,
    windowed_coordinate,
)
from ricprobe.geometry import ConformalDisk

EQ = np.array([1.0, 0.0, 0.0])
SCHED = DEFAULT_SCHEDULE["interior"]


@given(st.floats(-5, 5), st.floats(-5, 5))
def test_fit_recovers_exact_affine_data(a, b):
    y = [a + b * T for T in SCHED]
    fit = fit_limit(SCHED, y, [0.01] * len(SCHED))
    assert abs(fit.intercept - a) < 1e-9 and abs(fit.slope - b) < 1e-8
    yb = [a + b * math.sqrt(T) for T in SCHED]
    fb = fit_limit(SCHED, yb, [0.01] * len(SCHED), "boundary")
    assert abs(fb.intercept - a) < 1e-9


def test_fit_quadratic_and_degenerate_weights():
    y = [1.0 + 2 * T - 30 * T * T for T in SCHED]
    q = fit_limit(SCHED, y, [0.0] * len(SCHED), degree=2)
    assert abs(q.intercept - 1.0) < 1e-9 and np.isfinite(q.intercept_ci)
    with pytest.raises(FitError):
        fit_limit(SCHED[:3], [1, 1, 1], [1, 1, 1])
    with pytest.raises(FitError):
        fit_limit(SCHED[::-1], [1] * 6, [1] * 6)


def test_fit_interval_inflated_by_scatter():
    rs = np.random.default_rng(0)
    y = 1 + 0.1 * rs.standard_normal(len(SCHED))
    tight = fit_limit(SCHED, y, [1e-4] * 6)
    loose = fit_limit(SCHED, y, [1.0] * 6)
    assert tight.chi2_dof > 1 and tight.intercept_ci > 1e-4


def test_norm_p_bias_correction():
    rs = np.random.default_rng(5)
    m = np.array([0.3, -0.1])
    vals = []
    for _ in range(2000):
        vu = m + rs.standard_normal((50, 2))
        vals.append(_norm_p_stats(vu, 2)[0])
    # the naive |mean|^2 overshoots by trace(C)/n = 0.04; replicate sd of the mean is about 0.0022
    assert abs(np.mean(vals) - m @ m) < 0.008


def test_keep_mask_drops_whole_pairs():
    d = np.array([False, True, False, False])
    assert keep_mask(d, True).tolist() == [False, False, True, True]
    assert keep_mask(d, False).tolist() == [True, False, True, True]


def test_test_function_certification():
    S = Sphere(2)
    sphere_coordinate(S, EQ, 2)
    with pytest.raises(PreconditionError):
        sphere_coordinate(S, EQ, 0)  # |grad x0| = 0 at the probe
    C = SphericalCap(math.pi / 3)
    b = C.boundary_probe(0.0)
    with pytest.raises(PreconditionError):
        sphere_coordinate(C, b, 0)  # gradient has a normal part
    assert sphere_coordinate(C, b, 1).on_boundary
    windowed_coordinate(HalfSpace(2), np.array([0.0, 4.0]), 0)
    D = ConformalDisk.gaussian_bump(0.3, 1.0)
    tf = chart_linear(D, np.array([0.3, 0.1]))
    assert abs(D.norm(tf.probe, tf.direction()) - 1.0) < 1e-12


def test_heat_semigroup_on_sphere():
    S = Sphere(2)
    p = RunParams(n_paths=40000, n_steps=20, seed=2)
    tf = sphere_coordinate(S, np.array([0.6, 0.0, 0.8]), 1)
    x = np.array([0.0, 0.6, 0.8])
    est = pt_f(S, x, tf.f, 0.2, p)
    assert abs(est.value - math.exp(-0.4) * 0.6) < 2.5 * est.ci


def test_bismut_matches_analytic_gradient():
    # grad P_T x2 = e^{-2T} grad x2 on S^2
    S = Sphere(2)
    tf = sphere_coordinate(S, EQ, 2)
    b = grad_pt_f_bismut(S, EQ, tf, 0.3, RunParams(n_paths=20000, n_steps=30, seed=1))
    err = np.abs(b.value - [0, 0, math.exp(-0.6)])
    assert np.all(err <= 3 * b.ci + 1e-12)
    f = grad_pt_f_fd(S, EQ, tf, 0.3, RunParams(n_paths=20000, n_steps=30, seed=1))
    ok, diff, tol = gradient_agreement(b, f)
    assert ok


def test_curvature_terms_track_closed_form():
    S = Sphere(2)
    tf = sphere_coordinate(S, EQ, 2)
    T = 0.04
    ens = simulate_ensemble(S, EQ, S.default_frame(EQ), SimConfig(T, 16, 9), 20000, track_Q=True)
    terms = curvature_terms(ens, tf)
    # closed form (2/3 + e^{-6T}/3 - e^{-4T})/(2T) at T = 0.04, mpmath
    assert abs(terms["gradient"].value - 0.95915205903299747) < 3e-3
    assert abs(terms["variance"].value - 1.0) < 5 * terms["variance"].ci + 0.1


def test_variance_short_time_and_mean_estimate():
    S = Sphere(2)
    tf = sphere_coordinate(S, EQ, 2)
    v = variance_short_time(S, EQ, tf, 0.005, RunParams(n_paths=20000, n_steps=5, seed=4))
    assert abs(v.value - 2.0) < 0.1
    ens = simulate_ensemble(S, EQ, S.default_frame(EQ), SimConfig(0.1, 5, 1), 4)
    ens.discarded[:] = True
    with pytest.raises(PreconditionError):
        mean_estimate(ens, np.ones(4))


def test_integrability_diagnostic_constant_K():
    from ricprobe import Bounds

    S = Sphere(2)
    ens = simulate_ensemble(S, EQ, S.default_frame(EQ), SimConfig(0.2, 10, 1), 100, bounds=Bounds(1.0, 0.0))
    d = integrability_diagnostic(ens, 0.5)
    assert abs(d["mean"] - math.exp(2.5 * 0.2)) < 1e-9 and not d["heavy_tail"]
