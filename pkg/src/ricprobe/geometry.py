"""Analytic oracles for the catalog of test manifolds.

Points are ambient coordinate arrays of shape ``(..., n)``; a frame at a point
is an array ``(..., d, n)`` whose rows are the orthonormal vectors
``e_1, ..., e_d``.  Every method broadcasts over leading axes so the same
code serves single points and whole ensembles.

Catalog
-------
Sphere(d)            unit sphere in R^(d+1), no boundary.
SphericalCap(theta0) sphere points with colatitude <= theta0 (pole e_n).
HalfSpace(d)         {x in R^d : x_d >= 0}.
ConformalDisk(w)     R^2 with metric exp(2 w(u)) |du|^2, given by w = log(lambda).

All catalog manifolds have Ric = rho(x) g pointwise (constant curvature or
dimension two), which is what :meth:`Manifold.ricci_scalar` returns.  The
second fundamental form of the boundary is ``kappa * g`` on the boundary
tangent space, with ``II(X, Y) = -<nabla_X N, Y>`` for the inward normal
``N``; a convex boundary therefore has ``kappa > 0``.
"""

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateTransportError, PreconditionError

TOL_PROJ = 1e-10
TOL_FRAME = 1e-8
TOL_BOUNDARY = 1e-9


def _dot(u, v):
    return np.sum(u * v, axis=-1)


@dataclass(frozen=True)
class RadialDrift:
    """Drift ``Z = -strength * grad V`` for a radial potential about ``center``.

    ``potential`` is ``"quadratic"`` (V = |y|^2/2), ``"quartic"``
    (V = |y|^4/4) or ``"linear"`` (V = <a, y> with ``a = direction``), where
    ``y = x - center``.  On spheres the ambient field is projected onto the
    tangent space.  A negative ``strength`` gives a repelling field.
    """

    potential: str = "quadratic"
    strength: float = 1.0
    center: tuple = None
    direction: tuple = None

    def __post_init__(self):
        if self.potential not in ("quadratic", "quartic", "linear"):
            raise PreconditionError(f"unknown potential {self.potential!r}")
        if self.potential == "linear" and self.direction is None:
            raise PreconditionError("linear potential needs a direction")

    def _offset(self, x):
        if self.center is None:
            return x
        return x - np.asarray(self.center, dtype=float)

    def field(self, x):
        x = np.asarray(x, dtype=float)
        y = self._offset(x)
        c = self.strength
        if self.potential == "quadratic":
            return -c * y
        if self.potential == "quartic":
            return -c * _dot(y, y)[..., None] * y
        a = np.asarray(self.direction, dtype=float)
        return -c * np.broadcast_to(a, x.shape).copy()

    def jacobian(self, x):
        """Ambient Jacobian ``J[..., k, l] = d field_k / d x_l``."""
        x = np.asarray(x, dtype=float)
        n = x.shape[-1]
        y = self._offset(x)
        c = self.strength
        eye = np.eye(n)
        if self.potential == "quadratic":
            return np.broadcast_to(-c * eye, x.shape[:-1] + (n, n)).copy()
        if self.potential == "quartic":
            r2 = _dot(y, y)[..., None, None]
            return -c * (r2 * eye + 2.0 * y[..., :, None] * y[..., None, :])
        return np.zeros(x.shape[:-1] + (n, n))


def gram_schmidt(inner, x, F):
    """Modified Gram-Schmidt of the rows of ``F`` under ``inner(x, ., .)``."""
    F = np.array(F, dtype=float, copy=True)
    d = F.shape[-2]
    for i in range(d):
        for j in range(i):
            c = inner(x, F[..., i, :], F[..., j, :])
            F[..., i, :] -= c[..., None] * F[..., j, :]
        nrm = np.sqrt(inner(x, F[..., i, :], F[..., i, :]))
        F[..., i, :] /= nrm[..., None]
    return F


class Manifold:
    """Common interface; see the module docstring for conventions."""

    kind = "manifold"
    dim: int
    ambient: int
    drift: RadialDrift = None
    has_boundary = False

    # -- metric -----------------------------------------------------------
    def inner(self, x, u, v):
        return _dot(u, v)

    def norm(self, x, v):
        return np.sqrt(self.inner(x, v, v))

    def frame_coords(self, x, F, v):
        """Components ``U^{-1} v`` of ``v`` in the orthonormal frame ``F``."""
        return self.inner(x[..., None, :], F, v[..., None, :])

    @staticmethod
    def from_coords(F, a):
        """The tangent vector ``U a``."""
        return np.einsum("...i,...in->...n", a, F)

    def gram(self, x, F):
        return self.inner(x[..., None, None, :], F[..., :, None, :], F[..., None, :, :])

    # -- points -----------------------------------------------------------
    def residual(self, x):
        raise NotImplementedError

    def check_point(self, x, tol=TOL_PROJ):
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.ambient:
            raise PreconditionError(f"expected ambient dimension {self.ambient}, got {x.shape[-1]}")
        res = self.residual(x)
        if np.any(~(res <= tol)):
            raise PreconditionError(f"point off {self.kind}: residual {np.max(res):.3g}")
        return x

    def retract(self, x):
        return x

    def check_frame(self, x, F, tol=TOL_FRAME):
        G = self.gram(x, F)
        err = np.max(np.abs(G - np.eye(self.dim)))
        tang = np.max(np.abs(F - self.tangent_project(x[..., None, :], F)))
        if not (err <= tol and tang <= tol):
            raise PreconditionError(f"invalid frame: gram error {err:.3g}, normal part {tang:.3g}")
        return F

    def tangent_project(self, x, v):
        return np.array(v, dtype=float, copy=True)

    def exp(self, x, v):
        return x + v

    def transport(self, x, y, F):
        return np.array(F, dtype=float, copy=True)

    def reorthonormalize(self, x, F):
        return gram_schmidt(self.inner, x, self.tangent_project(x[..., None, :], F))

    def default_frame(self, x):
        raise NotImplementedError

    def distance(self, x, y):
        return np.sqrt(_dot(x - y, x - y))

    # -- curvature --------------------------------------------------------
    def ricci_scalar(self, x):
        """``rho`` with ``Ric = rho g`` at ``x``."""
        return np.zeros(np.shape(x)[:-1])

    def drift_field(self, x):
        x = np.asarray(x, dtype=float)
        if self.drift is None:
            return np.zeros_like(x)
        return self.drift.field(x)

    def drift_form(self, x, F):
        """``J[..., i, j] = <nabla_{e_i} Z, e_j>``."""
        shape = np.shape(F)[:-2] + (self.dim, self.dim)
        if self.drift is None:
            return np.zeros(shape)
        Jamb = self.drift.jacobian(x)
        # <J e_i, e_j>
        return np.einsum("...jk,...kl,...il->...ij", F, Jamb, F)

    # -- boundary ---------------------------------------------------------
    def boundary(self, x):
        """(signed distance to the boundary, inward normal N)."""
        x = np.asarray(x, dtype=float)
        return np.full(x.shape[:-1], np.inf), np.full(x.shape, np.nan)

    def boundary_point(self, x):
        raise PreconditionError(f"{self.kind} has no boundary")

    def reflect_once(self, y):
        """Reflect exterior points across the boundary along the normal geodesic.

        Returns the reflected points and the exterior depth (zero for
        interior points).
        """
        return y, np.zeros(np.shape(y)[:-1])

    def second_form_scalar(self, b):
        return np.zeros(np.shape(b)[:-1])


class Sphere(Manifold):
    kind = "sphere"

    def __init__(self, d=2, drift=None):
        if d < 1:
            raise PreconditionError("sphere dimension must be >= 1")
        self.dim = int(d)
        self.ambient = self.dim + 1
        self.drift = drift

    def __repr__(self):
        return f"Sphere(d={self.dim})"

    def residual(self, x):
        return np.abs(np.sqrt(_dot(x, x)) - 1.0)

    def retract(self, x):
        return x / np.sqrt(_dot(x, x))[..., None]

    def tangent_project(self, x, v):
        v = np.asarray(v, dtype=float)
        return v - _dot(v, x)[..., None] * x

    def exp(self, x, v):
        th = np.sqrt(_dot(v, v))
        y = np.cos(th)[..., None] * x + np.sinc(th / np.pi)[..., None] * v
        return self.retract(y)

    def transport(self, x, y, F):
        s = 1.0 + _dot(x, y)
        if np.any(s < 1e-12):
            raise DegenerateTransportError("antipodal points: transport is not unique")
        c = _dot(F, y[..., None, :]) / s[..., None]
        return F - c[..., None] * (x + y)[..., None, :]

    def distance(self, x, y):
        half = np.sqrt(_dot(x - y, x - y)) / 2.0
        return 2.0 * np.arcsin(np.minimum(half, 1.0))

    def default_frame(self, x):
        x = np.asarray(x, dtype=float)
        n = self.ambient
        pole = np.zeros(n)
        pole[-1] = 1.0
        near = x[..., -1] > 0
        w = np.where(near[..., None], x - pole, x + pole)
        ww = _dot(w, w)
        eye = np.eye(n)
        safe = ww > 1e-300
        H = eye - 2.0 * np.where(safe[..., None, None], w[..., :, None] * w[..., None, :] / np.where(safe, ww, 1.0)[..., None, None], 0.0)
        # columns of H map e_n to +-x; the remaining columns span the tangent space
        return np.swapaxes(H, -1, -2)[..., : self.dim, :].copy()

    def ricci_scalar(self, x):
        return np.full(np.shape(x)[:-1], float(self.dim - 1))

    def drift_field(self, x):
        x = np.asarray(x, dtype=float)
        if self.drift is None:
            return np.zeros_like(x)
        return self.tangent_project(x, self.drift.field(x))

    def drift_form(self, x, F):
        J = super().drift_form(x, F)
        if self.drift is None:
            return J
        gx = _dot(self.drift.field(x), x)
        return J - gx[..., None, None] * np.eye(self.dim)


class SphericalCap(Sphere):
    """Closed geodesic ball of radius ``theta0`` about the pole ``e_n``."""

    kind = "cap"
    has_boundary = True

    def __init__(self, theta0, d=2, drift=None):
        if not (0.0 < theta0 < np.pi):
            raise PreconditionError(f"theta0 must lie in (0, pi), got {theta0}")
        super().__init__(d, drift)
        self.theta0 = float(theta0)

    def __repr__(self):
        return f"SphericalCap(theta0={self.theta0:.6g}, d={self.dim})"

    def colatitude(self, x):
        perp = np.sqrt(_dot(x[..., :-1], x[..., :-1]))
        return np.arctan2(perp, x[..., -1])

    def residual(self, x):
        return np.maximum(super().residual(x), np.maximum(self.colatitude(x) - self.theta0, 0.0))

    def _meridian(self, x):
        perp = x[..., :-1]
        r = np.sqrt(_dot(perp, perp))
        u = np.zeros_like(perp)
        u[..., 0] = 1.0
        ok = r > 1e-300
        return np.where(ok[..., None], perp / np.where(ok, r, 1.0)[..., None], u)

    def boundary(self, x):
        x = np.asarray(x, dtype=float)
        th = self.colatitude(x)
        u = self._meridian(x)
        # unit tangent pointing to the pole: -d/dtheta
        N = np.concatenate([-np.cos(th)[..., None] * u, np.sin(th)[..., None]], axis=-1)
        return self.theta0 - th, N

    def boundary_point(self, x):
        u = self._meridian(np.asarray(x, dtype=float))
        s, c = np.sin(self.theta0), np.cos(self.theta0)
        return np.concatenate([s * u, np.full(u.shape[:-1] + (1,), c)], axis=-1)

    def boundary_probe(self, longitude=0.0):
        """The boundary point at the given longitude (d = 2)."""
        s, c = np.sin(self.theta0), np.cos(self.theta0)
        p = np.zeros(self.ambient)
        p[0], p[1], p[-1] = s * np.cos(longitude), s * np.sin(longitude), c
        return p

    def reflect_once(self, y):
        th = self.colatitude(y)
        depth = np.maximum(th - self.theta0, 0.0)
        out = depth > 0
        if not np.any(out):
            return y, depth
        u = self._meridian(y)
        th2 = 2.0 * self.theta0 - th
        refl = np.concatenate([np.sin(th2)[..., None] * u, np.cos(th2)[..., None]], axis=-1)
        return np.where(out[..., None], refl, y), depth

    def second_form_scalar(self, b):
        return np.full(np.shape(b)[:-1], 1.0 / np.tan(self.theta0))


class HalfSpace(Manifold):
    kind = "halfspace"
    has_boundary = True

    def __init__(self, d=2, drift=None):
        if d < 1:
            raise PreconditionError("dimension must be >= 1")
        self.dim = self.ambient = int(d)
        self.drift = drift

    def __repr__(self):
        return f"HalfSpace(d={self.dim})"

    def residual(self, x):
        return np.maximum(-x[..., -1], 0.0)

    def default_frame(self, x):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(np.eye(self.dim), x.shape[:-1] + (self.dim, self.dim)).copy()

    def boundary(self, x):
        x = np.asarray(x, dtype=float)
        N = np.zeros_like(x)
        N[..., -1] = 1.0
        return x[..., -1].copy(), N

    def boundary_point(self, x):
        b = np.array(x, dtype=float, copy=True)
        b[..., -1] = 0.0
        return b

    def reflect_once(self, y):
        depth = np.maximum(-y[..., -1], 0.0)
        if not np.any(depth > 0):
            return y, depth
        y = np.array(y, copy=True)
        y[..., -1] = np.abs(y[..., -1])
        return y, depth


def _fd_grad(w, x, h):
    x = np.asarray(x, dtype=float)
    g = np.empty_like(x)
    for k in range(x.shape[-1]):
        e = np.zeros(x.shape[-1])
        e[k] = h
        g[..., k] = (w(x + e) - w(x - e)) / (2.0 * h)
    return g


def _fd_laplacian(w, x, h):
    x = np.asarray(x, dtype=float)
    w0 = w(x)
    acc = -2.0 * x.shape[-1] * w0
    for k in range(x.shape[-1]):
        e = np.zeros(x.shape[-1])
        e[k] = h
        acc = acc + w(x + e) + w(x - e)
    return acc / h**2


class ConformalDisk(Manifold):
    """The plane (or an open part of it) with metric ``exp(2 w(u)) |du|^2``.

    ``log_lambda`` maps chart points ``(..., 2)`` to ``w = log lambda``.  Its
    gradient and Laplacian are taken by central differences unless oracles
    are supplied.  The Laplace-Beltrami operator is ``exp(-2w)`` times the
    flat Laplacian, so the diffusion needs no drift correction in the chart.
    """

    kind = "disk"

    def __init__(self, log_lambda, grad=None, laplacian=None, drift=None, h_fd=1e-4, name="disk"):
        self.dim = self.ambient = 2
        self.w = log_lambda
        self._grad = grad
        self._lap = laplacian
        self.drift = drift
        self.h_fd = h_fd
        self.name = name

    def __repr__(self):
        return f"ConformalDisk({self.name})"

    @classmethod
    def stereographic_sphere(cls):
        """Unit 2-sphere minus a pole in stereographic coordinates."""

        def w(u):
            return np.log(2.0) - np.log1p(_dot(u, u))

        def grad(u):
            return -2.0 * u / (1.0 + _dot(u, u))[..., None]

        def lap(u):
            return -4.0 / (1.0 + _dot(u, u)) ** 2

        return cls(w, grad, lap, name="stereographic")

    @classmethod
    def gaussian_bump(cls, amplitude=0.3, width=1.0):
        """``lambda = 1 + a exp(-|u|^2 / (2 s^2))``: curved core, flat far field."""

        def w(u):
            return np.log1p(amplitude * np.exp(-_dot(u, u) / (2.0 * width**2)))

        return cls(w, name=f"bump(a={amplitude}, s={width})")

    def lam(self, x):
        return np.exp(self.w(x))

    def grad_w(self, x):
        if self._grad is not None:
            return self._grad(x)
        return _fd_grad(self.w, x, self.h_fd)

    def laplacian_w(self, x):
        if self._lap is not None:
            return self._lap(x)
        return _fd_laplacian(self.w, x, self.h_fd)

    def inner(self, x, u, v):
        return np.exp(2.0 * self.w(x)) * _dot(u, v)

    def residual(self, x):
        wx = self.w(np.asarray(x, dtype=float))
        return np.where(np.isfinite(wx), 0.0, np.inf)

    def default_frame(self, x):
        x = np.asarray(x, dtype=float)
        s = np.exp(-self.w(x))
        return s[..., None, None] * np.broadcast_to(np.eye(2), x.shape[:-1] + (2, 2))

    def christoffel(self, x, a, b):
        """``Gamma(a, b)`` in chart components."""
        g = self.grad_w(x)
        return a * _dot(b, g)[..., None] + b * _dot(a, g)[..., None] - _dot(a, b)[..., None] * g

    def exp(self, x, v):
        return x + v - 0.5 * self.christoffel(x, v, v)

    def transport(self, x, y, F):
        m = 0.5 * (x + y)
        g = self.grad_w(m)
        dx = y - x
        dalpha = g[..., 1] * dx[..., 0] - g[..., 0] * dx[..., 1]
        c, s = np.cos(dalpha)[..., None], np.sin(dalpha)[..., None]
        C = np.exp(self.w(x))[..., None, None] * F
        rot = np.stack([c * C[..., 0] - s * C[..., 1], s * C[..., 0] + c * C[..., 1]], axis=-1)
        return np.exp(-self.w(y))[..., None, None] * rot

    def distance(self, x, y):
        # length of the chart segment (an upper bound on the geodesic distance)
        nodes, weights = np.polynomial.legendre.leggauss(6)
        d = y - x
        acc = 0.0
        for t, wt in zip(0.5 * (nodes + 1.0), 0.5 * weights):
            acc = acc + wt * np.exp(self.w(x + t * d))
        return acc * np.sqrt(_dot(d, d))

    def ricci_scalar(self, x):
        return -np.exp(-2.0 * self.w(x)) * self.laplacian_w(x)

    def drift_form(self, x, F):
        if self.drift is None:
            return np.zeros(np.shape(F)[:-2] + (2, 2))
        Z = self.drift.field(x)
        J = self.drift.jacobian(x)
        out = np.empty(np.shape(F)[:-2] + (2, 2))
        for i in range(2):
            ei = F[..., i, :]
            nab = np.einsum("...kl,...l->...k", J, ei) + self.christoffel(x, ei, Z)
            for j in range(2):
                out[..., i, j] = self.inner(x, nab, F[..., j, :])
        return out


# -- operations on the catalog ----------------------------------------------


def tangent_project(M, x, v):
    """Tangential part of ``v`` at ``x``."""
    x = M.check_point(x)
    return M.tangent_project(x, np.asarray(v, dtype=float))


def exp_map(M, x, v):
    x = M.check_point(x)
    return M.exp(x, np.asarray(v, dtype=float))


def parallel_transport(M, x, y, F):
    """Transport the frame ``F`` at ``x`` to ``y`` along the connecting geodesic."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    G = M.transport(x, y, np.asarray(F, dtype=float))
    return M.reorthonormalize(y, G)


def ricci_z_matrix(M, x, F):
    """Matrix of ``Ric_Z(u)`` with ``<Ric_Z(u) a, b> = Ric(ua, ub) - <nabla_{ua} Z, ub>``.

    Row ``j``, column ``i`` holds ``Ric_Z(e_i, e_j)``; the drift term is not
    symmetrised.
    """
    x = np.asarray(x, dtype=float)
    F = np.asarray(F, dtype=float)
    rho = M.ricci_scalar(x)
    J = M.drift_form(x, F)
    return rho[..., None, None] * np.eye(M.dim) - np.swapaxes(J, -1, -2)


def operator_bound(R):
    """``sup_{|a|=1} |<R a, a>|``: largest |eigenvalue| of the symmetric part."""
    S = 0.5 * (R + np.swapaxes(R, -1, -2))
    return np.max(np.abs(np.linalg.eigvalsh(S)), axis=-1)


def ricci_z_norm(M, x):
    """Pointwise ``||Ric_Z||(x)``."""
    x = np.asarray(x, dtype=float)
    return operator_bound(ricci_z_matrix(M, x, M.default_frame(x)))


def boundary_data(M, x):
    """Signed distance to the boundary and the inward unit normal.

    Returns ``(inf, None)`` for manifolds without boundary.
    """
    x = np.asarray(x, dtype=float)
    if not M.has_boundary:
        return np.inf, None
    return M.boundary(x)


def normal_coords(M, x, F):
    """``u^{-1} N`` at a boundary base point."""
    _, N = M.boundary(x)
    return M.frame_coords(x, F, N)


def second_form_matrix(M, x, F):
    """Matrix with ``<II(u) a, b> = II(ua - <ua,N>N, ub - <ub,N>N)``."""
    x = np.asarray(x, dtype=float)
    if not M.has_boundary:
        raise PreconditionError(f"{M!r} has no boundary")
    dist, _ = M.boundary(x)
    if np.any(np.abs(dist) > TOL_BOUNDARY):
        raise PreconditionError("second_form_matrix needs a boundary base point")
    n = normal_coords(M, x, np.asarray(F, dtype=float))
    kappa = M.second_form_scalar(x)
    proj = np.eye(M.dim) - n[..., :, None] * n[..., None, :]
    return kappa[..., None, None] * proj


def second_form_norm(M, b):
    return np.abs(M.second_form_scalar(np.asarray(b, dtype=float)))


def frame_from(M, x, vectors):
    """Orthonormal frame at ``x`` built from (projected) ``vectors`` in order."""
    x = np.asarray(x, dtype=float)
    V = M.tangent_project(x[None, :], np.atleast_2d(np.asarray(vectors, dtype=float)))
    rows = []
    for v in list(V) + list(M.default_frame(x)):
        for r in rows:
            v = v - M.inner(x, v, r) * r
        nv = float(np.sqrt(M.inner(x, v, v)))
        if nv > 1e-8:
            rows.append(v / nv)
        if len(rows) == M.dim:
            break
    return np.array(rows)


def conformal_tensors(M, phi, x, **kw):
    """Transformed Ricci and second fundamental forms; see :mod:`ricprobe.conformal`."""
    from .conformal import conformal_tensors as _ct

    return _ct(M, phi, x, **kw)
