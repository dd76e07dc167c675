import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from ricprobe.errors import PreconditionError
from ricprobe.geometry import (
    ConformalDisk,
    HalfSpace,
    RadialDrift,
    Sphere,
    SphericalCap,
    boundary_data,
    operator_bound,
    parallel_transport,
    ricci_z_matrix,
    ricci_z_norm,
    second_form_matrix,
    second_form_norm,
)

vec3 = arrays(np.float64, 3, elements=st.floats(-1, 1))


def _unit(v):
    n = np.linalg.norm(v)
    return None if n < 1e-3 else v / n


@given(vec3, vec3)
def test_sphere_exp_stays_on_sphere(a, b):
    S = Sphere(2)
    x = _unit(a)
    if x is None:
        return
    v = S.tangent_project(x, 0.5 * b)
    y = S.retract(S.exp(x, v))
    assert abs(np.linalg.norm(y) - 1) < 1e-12
    # geodesic length equals |v| for short steps
    assert abs(S.distance(x, y) - np.linalg.norm(v)) < 1e-9


@given(vec3, vec3)
def test_transport_keeps_orthonormal_frames(a, b):
    S = Sphere(2)
    x, y = _unit(a), _unit(b)
    if x is None or y is None or x @ y < -0.9:
        return
    F = S.default_frame(x)
    G = parallel_transport(S, x, y, F)
    assert np.allclose(S.gram(y, G), np.eye(2), atol=1e-10)
    assert np.allclose(G @ y, 0, atol=1e-10)


def test_sphere_curvature_and_checks():
    for d in (2, 3, 4):
        S = Sphere(d)
        x = np.zeros(d + 1)
        x[0] = 1
        assert np.allclose(ricci_z_matrix(S, x, S.default_frame(x)), (d - 1) * np.eye(d))
    with pytest.raises(PreconditionError):
        Sphere(2).check_point(np.array([1.0, 0.1, 0.0]))


def test_halfspace_drift_bakry_emery():
    H = HalfSpace(2, RadialDrift("quadratic", 1.0))
    x = np.array([0.3, 2.0])
    assert np.allclose(ricci_z_matrix(H, x, H.default_frame(x)), np.eye(2))
    H4 = HalfSpace(2, RadialDrift("quartic", 1.0, center=(0.0, 5.0)))
    y = np.array([1.0, 5.0])
    # Ric_Z = |y|^2 I + 2 y y^T for V = |y|^4 / 4
    assert np.allclose(ricci_z_matrix(H4, y, H4.default_frame(y)), np.diag([3.0, 1.0]))
    assert abs(ricci_z_norm(H4, y) - 3.0) < 1e-12


def test_cap_second_form_and_reflection():
    th = math.pi / 3
    C = SphericalCap(th)
    b = C.boundary_probe(0.3)
    assert abs(C.boundary(b)[0]) < 1e-12
    II = second_form_matrix(C, b, C.default_frame(b))
    assert abs(operator_bound(II) - 1 / math.tan(th)) < 1e-12
    assert abs(second_form_norm(C, b) - 0.5773502691896258) < 1e-12
    # a point beyond the boundary is mirrored to the same depth inside
    y = np.array([math.sin(th + 0.05), 0.0, math.cos(th + 0.05)])
    z, depth = C.reflect_once(y)
    assert abs(depth - 0.05) < 1e-12
    assert abs(C.colatitude(z) - (th - 0.05)) < 1e-12
    with pytest.raises(PreconditionError):
        SphericalCap(4.0)


@given(st.floats(-3, 3), st.floats(-3, 0))
def test_halfspace_reflection_is_mirror(a, h):
    H = HalfSpace(2)
    z, depth = H.reflect_once(np.array([a, h]))
    assert z[1] >= 0 and abs(depth - max(-h, 0)) < 1e-15 and z[0] == a


def test_boundaryless_data():
    d, N = boundary_data(Sphere(2), np.array([1.0, 0, 0]))
    assert d == np.inf and N is None
    with pytest.raises(PreconditionError):
        second_form_matrix(Sphere(2), np.array([1.0, 0, 0]), np.eye(3)[:2])


def test_stereographic_disk_has_unit_curvature():
    D = ConformalDisk.stereographic_sphere()
    for u in ([0.0, 0.0], [0.4, -0.3], [1.5, 0.2]):
        assert abs(D.ricci_scalar(np.array(u)) - 1.0) < 1e-12
    # finite-difference Laplacian agrees with the closed form
    D2 = ConformalDisk(D.w)
    assert abs(D2.ricci_scalar(np.array([0.4, -0.3])) - 1.0) < 1e-5


def test_disk_frame_is_orthonormal():
    D = ConformalDisk.gaussian_bump(0.3, 1.0)
    u = np.array([0.2, 0.7])
    F = D.default_frame(u)
    lam2 = math.exp(2 * D.w(u))
    assert np.allclose(lam2 * F @ F.T, np.eye(2))
