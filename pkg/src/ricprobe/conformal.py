"""Conformal change of metric ``g_phi = phi^{-2} g`` and its effect on the tensors.

With ``u = -log phi`` the classical transformation rules read::

    nabla^phi_X Y = nabla_X Y - <X, grad log phi> Y - <Y, grad log phi> X + <X, Y> grad log phi
    Ric_phi = Ric + (d - 2) phi^{-1} Hess phi + (phi^{-1} Delta phi - (d - 1) |grad log phi|^2) g
    II^phi  = phi^{-1} (II + (N log phi) g)

Two other curvature variants are kept for comparison: ``"printed"`` uses
``-(d - 3) |grad log phi|`` in place of the last term and ``"squared"`` uses
``-(d - 3) |grad log phi|^2``.  The chart oracle :func:`chart_ricci`
decides between them.  For the second form the ``"printed"`` variant is
``phi^{-1} II + (N log phi) g``; it coincides with the classical rule
wherever ``phi = 1``.

Derivatives of ``phi`` are central differences (step ``h_fd = 1e-4``) in
normal coordinates ``a -> exp_x(sum a_i e_i)``.
"""

import math
from dataclasses import dataclass

import numpy as np

from .errors import OutsideDomainError, PreconditionError
from .geometry import (
    ConformalDisk,
    HalfSpace,
    Sphere,
    operator_bound,
    second_form_matrix,
)
from .pathspace import smoothstep7

H_FD = 1e-4
RIC_VARIANTS = ("classical", "printed", "squared")


# -- conformal factors -------------------------------------------------------


@dataclass
class ConformalFactor:
    """A scalar field ``phi`` on the base with ``phi = 1`` on ``B_{r_in}(center)``.

    ``phi`` maps points ``(..., n)`` to ``(...)``.  ``r_in``/``r_out`` are
    descriptive (``phi = 0`` outside ``B_{r_out}``) and may be ``None``.
    """

    phi: object
    center: np.ndarray = None
    r_in: float = None
    r_out: float = None
    name: str = "phi"

    def __call__(self, x):
        return np.asarray(self.phi(np.asarray(x, dtype=float)), dtype=float)

    @classmethod
    def radial(cls, M, center, r_in, r_out):
        """``phi = 1 - smoothstep7((rho(x, center) - r_in) / (r_out - r_in))``."""
        if not (0 < r_in < r_out):
            raise PreconditionError("need 0 < r_in < r_out")
        c = np.asarray(center, dtype=float)

        def phi(x):
            r = M.distance(c, x)
            return 1.0 - smoothstep7((r - r_in) / (r_out - r_in))

        return cls(phi, c, r_in, r_out, f"radial({r_in:g}, {r_out:g})")

    @classmethod
    def gaussian(cls, c=1.0, center=None):
        """``phi = exp(-c |x - center|^2)`` on a flat base."""

        def phi(x):
            y = x if center is None else x - center
            return np.exp(-c * np.sum(y * y, axis=-1))

        return cls(phi, center, None, None, f"exp(-{c:g}|x|^2)")

    @classmethod
    def bump(cls, center, amplitude=0.3, width=0.3):
        """``phi = 1 - a exp(-|x - center|^2 / (2 s^2))``: a dip, flat (phi -> 1) far away."""
        cc = np.asarray(center, dtype=float)

        def phi(x):
            y = x - cc
            return 1.0 - amplitude * np.exp(-np.sum(y * y, axis=-1) / (2 * width**2))

        return cls(phi, cc, None, None, f"dip(a={amplitude:g}, s={width:g})")

    @classmethod
    def compact_dip(cls, center, amplitude=0.3, width=1.0):
        """``phi = 1 - a (1 - smoothstep7(|x - center| / width))``: exactly 1 beyond ``width``."""
        cc = np.asarray(center, dtype=float)

        def phi(x):
            r = np.sqrt(np.sum((x - cc) ** 2, axis=-1))
            return 1.0 - amplitude * (1.0 - smoothstep7(r / width))

        return cls(phi, cc, None, None, f"compact_dip(a={amplitude:g}, s={width:g})")

    @classmethod
    def exp_height(cls, c, axis=-1):
        """``phi = exp(c x_axis)``; on the hemisphere ``N log phi = c`` along the equator."""

        def phi(x):
            return np.exp(c * x[..., axis])

        return cls(phi, None, None, None, f"exp({c:g} x{axis})")


# -- derivatives in normal coordinates ---------------------------------------


def _normal_map(M, x, F):
    def at(a):
        v = np.tensordot(a, F, axes=(-1, 0))
        return M.retract(M.exp(x, v))

    return at


def phi_derivatives(M, phi, x, F=None, h=H_FD):
    """``phi(x)``, frame gradient ``e_i phi`` and frame Hessian ``Hess phi(e_i, e_j)``."""
    x = np.asarray(x, dtype=float)
    F = M.default_frame(x) if F is None else np.asarray(F, dtype=float)
    d = M.dim
    at = _normal_map(M, x, F)
    p0 = float(phi(x))
    if not p0 > 0:
        raise OutsideDomainError(f"phi(x) = {p0:.3g} <= 0: point outside the conformal manifold")
    E = np.eye(d)
    g = np.empty(d)
    H = np.empty((d, d))
    for i in range(d):
        pp, pm = float(phi(at(h * E[i]))), float(phi(at(-h * E[i])))
        g[i] = (pp - pm) / (2 * h)
        H[i, i] = (pp - 2 * p0 + pm) / h**2
    for i in range(d):
        for j in range(i + 1, d):
            s = (float(phi(at(h * (E[i] + E[j])))) - float(phi(at(h * (E[i] - E[j]))))
                 - float(phi(at(h * (E[j] - E[i])))) + float(phi(at(-h * (E[i] + E[j]))))) / (4 * h * h)
            H[i, j] = H[j, i] = s
    return p0, g, H


# -- transformed tensors -----------------------------------------------------


@dataclass
class TransformedCurvature:
    phi: float
    ric: np.ndarray  # Ric_phi(e_i, e_j) in a g-orthonormal frame
    ric_phi_frame: np.ndarray  # Ric_phi(phi e_i, phi e_j): the g_phi-orthonormal frame
    norm: float  # ||Ric^phi_{phi Z}||(x)
    variant: str


def _ric_phi(M, x, F, p0, g, H, variant):
    d = M.dim
    Ric = float(M.ricci_scalar(x)) * np.eye(d)
    glog2 = float(g @ g) / p0**2
    lap = float(np.trace(H))
    if variant == "classical":
        iso = lap / p0 - (d - 1) * glog2
    elif variant == "printed":
        iso = lap / p0 - (d - 3) * math.sqrt(glog2)
    elif variant == "squared":
        iso = lap / p0 - (d - 3) * glog2
    else:
        raise PreconditionError(f"unknown variant {variant!r}; choose from {RIC_VARIANTS}")
    return Ric + (d - 2) * H / p0 + iso * np.eye(d)


def _drift_term(M, phi, x, F, p0, glog, h=H_FD):
    """``<nabla^phi_{e_i} (phi Z), e_j>`` in a g-orthonormal frame (zero without drift)."""
    d = M.dim
    if M.drift is None:
        return np.zeros((d, d))
    at = _normal_map(M, x, F)
    Z0 = p0 * M.drift_field(x)
    gradlog = np.tensordot(glog, F, axes=(0, 0))
    out = np.empty((d, d))
    E = np.eye(d)
    for i in range(d):
        xp, xm = at(h * E[i]), at(-h * E[i])
        Yp = float(phi(xp)) * M.drift_field(xp)
        Ym = float(phi(xm)) * M.drift_field(xm)
        nab = M.tangent_project(x, (Yp - Ym) / (2 * h))
        if isinstance(M, ConformalDisk):
            nab = nab + M.christoffel(x, F[i], Z0)
        X = F[i]
        conn = (nab - M.inner(x, X, gradlog) * Z0 - M.inner(x, Z0, gradlog) * X
                + M.inner(x, X, Z0) * gradlog)
        for j in range(d):
            out[i, j] = M.inner(x, conn, F[j])
    return out


def transformed_curvature(M, phi, x, variant="classical", F=None, h=H_FD):
    """``Ric_phi`` at ``x`` and the operator norm of ``Ric^phi_{phi Z}`` in the metric ``g_phi``."""
    x = np.asarray(x, dtype=float)
    F = M.default_frame(x) if F is None else np.asarray(F, dtype=float)
    p0, g, H = phi_derivatives(M, phi, x, F, h)
    R = _ric_phi(M, x, F, p0, g, H, variant)
    J = _drift_term(M, phi, x, F, p0, g / p0, h)
    Rz = R - J.T
    return TransformedCurvature(p0, R, p0**2 * R, float(operator_bound(p0**2 * Rz)), variant)


def transformed_second_form(M, phi, x, variant="printed", F=None, h=H_FD):
    """``II^phi`` at a boundary point, as a matrix in the g-orthonormal frame ``F``."""
    x = np.asarray(x, dtype=float)
    F = M.default_frame(x) if F is None else np.asarray(F, dtype=float)
    II = second_form_matrix(M, x, F)
    p0, g, _H = phi_derivatives(M, phi, x, F, h)
    _d, N = M.boundary(x)
    n = M.frame_coords(x, F, N)
    Nlog = float(n @ g) / p0
    proj = np.eye(M.dim) - np.outer(n, n)
    if variant == "printed":
        return II / p0 + Nlog * proj
    if variant == "classical":
        return (II + Nlog * proj) / p0
    raise PreconditionError(f"unknown variant {variant!r}")


def transformed_connection(M, phi, x, X, Y, h=H_FD):
    """``nabla^phi_X Y`` at ``x`` for a tangent vector ``X`` and a vector field ``Y``.

    ``Y`` maps points to tangent vectors; ``nabla_X Y`` is the central
    difference along the geodesic through ``X`` (projected to ``T_x`` on
    spheres, plus the Christoffel term on a conformal disk).
    """
    x = np.asarray(x, dtype=float)
    X = np.asarray(X, dtype=float)
    F = M.default_frame(x)
    p0, g, _ = phi_derivatives(M, phi, x, F, h)
    gradlog = np.tensordot(g / p0, F, axes=(0, 0))
    xp, xm = M.retract(M.exp(x, h * X)), M.retract(M.exp(x, -h * X))
    Y0 = np.asarray(Y(x), dtype=float)
    nab = M.tangent_project(x, (np.asarray(Y(xp)) - np.asarray(Y(xm))) / (2 * h))
    if isinstance(M, ConformalDisk):
        nab = nab + M.christoffel(x, X, Y0)
    return (nab - M.inner(x, X, gradlog) * Y0 - M.inner(x, Y0, gradlog) * X
            + M.inner(x, X, Y0) * gradlog)


def conformal_tensors(M, phi, x, variant="classical", second_variant="printed"):
    """``(Ric_phi in a g_phi-orthonormal frame, II^phi or None, phi Z at x)``."""
    x = np.asarray(x, dtype=float)
    tc = transformed_curvature(M, phi, x, variant)
    II = None
    if M.has_boundary:
        dist, _ = M.boundary(x)
        if abs(dist) <= 1e-9:
            II = transformed_second_form(M, phi, x, second_variant)
    Z = tc.phi * M.drift_field(x)
    return tc.ric_phi_frame, II, Z


# -- chart oracles -----------------------------------------------------------


def chart_christoffel(metric, u, h=1e-4):
    """``Gamma^k_ij`` (array ``[k, i, j]``) of a chart metric by central differences."""
    u = np.asarray(u, dtype=float)
    d = u.size
    G = metric(u)
    Gi = np.linalg.inv(G)
    dG = np.empty((d, d, d))  # dG[l, i, j] = d_l g_ij
    for l in range(d):
        e = np.zeros(d)
        e[l] = h
        dG[l] = (metric(u + e) - metric(u - e)) / (2 * h)
    # Gamma^k_ij = 1/2 g^{kl} (d_i g_jl + d_j g_il - d_l g_ij)
    T = np.einsum("ijl->ijl", dG) + np.einsum("jil->ijl", dG) - np.einsum("lij->ijl", dG)
    return 0.5 * np.einsum("kl,ijl->kij", Gi, T)


def chart_ricci(metric, u, h=1e-3):
    """Ricci tensor ``R_ij`` of a chart metric by nested central differences."""
    u = np.asarray(u, dtype=float)
    d = u.size
    Gam = chart_christoffel(metric, u, h)
    dGam = np.empty((d, d, d, d))  # dGam[l, k, i, j] = d_l Gamma^k_ij
    for l in range(d):
        e = np.zeros(d)
        e[l] = h
        dGam[l] = (chart_christoffel(metric, u + e, h) - chart_christoffel(metric, u - e, h)) / (2 * h)
    R = (np.einsum("kkij->ij", dGam) - np.einsum("jkik->ij", dGam)
         + np.einsum("kkl,lij->ij", Gam, Gam) - np.einsum("kjl,lik->ij", Gam, Gam))
    return 0.5 * (R + R.T)


def conformal_flat_metric(phi, d):
    """Chart metric ``phi^{-2} delta`` of a flat base."""

    def metric(u):
        return np.eye(d) / float(phi(u)) ** 2

    return metric


def rotation_to(p, target):
    """A rotation matrix taking the unit vector ``p`` to ``target``."""
    p = np.asarray(p, dtype=float)
    t = np.asarray(target, dtype=float)
    v = p + t
    if np.linalg.norm(v) < 1e-12:
        R = -np.eye(len(p))
        R[0, 0] = 1.0 if abs(p[0]) < 0.9 else -1.0
        return R
    # product of two reflections: first across p + t, then across t
    H1 = np.eye(len(p)) - 2 * np.outer(v, v) / (v @ v)
    H2 = np.eye(len(p)) - 2 * np.outer(t, t)
    return H2 @ H1


def stereo_inverse(u, R=None):
    """Inverse stereographic projection from the north pole, optionally rotated by ``R^T``."""
    u = np.asarray(u, dtype=float)
    s = np.sum(u * u, axis=-1)
    x = np.concatenate([2 * u, (s - 1.0)[..., None]], axis=-1) / (1.0 + s)[..., None]
    return x if R is None else x @ R


def sphere_chart_metric(phi, R=None):
    """Chart metric of ``phi^{-2} g_sphere`` in (rotated) stereographic coordinates."""

    def metric(u):
        lam = 2.0 / (1.0 + float(u @ u))
        return np.eye(2) * lam**2 / float(phi(stereo_inverse(u, R))) ** 2

    return metric


# -- conformal manifold ------------------------------------------------------


@dataclass
class ConformalManifold:
    """The base manifold with metric ``phi^{-2} g`` and drift ``phi Z``."""

    base: object
    phi: ConformalFactor

    def drift(self, x):
        return self.phi(x) * self.base.drift_field(x)

    def _grid(self, n):
        M = self.base
        if isinstance(M, Sphere):
            k = np.arange(n) + 0.5
            z = 1 - 2 * k / n
            r = np.sqrt(1 - z * z)
            th = math.pi * (3 - math.sqrt(5)) * k
            pts = np.stack([r * np.cos(th), r * np.sin(th), z], axis=1) if M.dim == 2 else None
            if pts is None:
                raise PreconditionError("grid sampling implemented for S^2 only")
            return pts[M.residual(pts) <= 1e-12]
        c = np.zeros(M.ambient) if self.phi.center is None else np.asarray(self.phi.center)
        R = self.phi.r_out if self.phi.r_out is not None else 3.0
        m = int(round(n ** (1.0 / M.dim)))
        axes = [np.linspace(ci - R, ci + R, m) for ci in c]
        pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, M.dim)
        return pts[M.residual(pts) <= 1e-12]

    def bound_sup(self, n=2000, floor=1e-6, second_variant="printed"):
        """Grid sups ``K_R`` of ``||Ric^phi_{phi Z}||`` and ``sigma_R`` of ``||II^phi||`` with a 2x refinement.

        ``sigma_R`` is sampled at the boundary projections of the grid and is
        0 for bases without boundary.
        """
        M = self.base
        out = {}
        for tag, m in (("coarse", n), ("fine", 2 * n)):
            pts = self._grid(m)
            vals, svals = [], []
            for x in pts:
                if float(self.phi(x)) <= floor:
                    continue
                vals.append(transformed_curvature(M, self.phi, x).norm)
            if M.has_boundary:
                for b in np.unique(np.round(M.boundary_point(pts), 12), axis=0):
                    if float(self.phi(b)) <= floor:
                        continue
                    svals.append(operator_bound(transformed_second_form(M, self.phi, b, second_variant)))
            out[tag] = (max(vals) if vals else 0.0, max(svals) if svals else 0.0)
        (kc, sc), (kf, sf) = out["coarse"], out["fine"]

        def conv(a, b):
            return abs(a - b) <= 0.05 * max(1.0, abs(b))

        return {"K_R": kf, "sigma_R": sf, "coarse": {"K_R": kc, "sigma_R": sc},
                "converged": conv(kc, kf) and conv(sc, sf)}

    def chart_manifold(self, probe):
        """The conformal surface as a :class:`ConformalDisk` chart centred at ``probe``.

        Sphere bases use stereographic coordinates in which ``probe`` is the
        origin; flat bases use the translated identity chart.
        """
        M = self.base
        probe = np.asarray(probe, dtype=float)
        phi = self.phi
        if isinstance(M, Sphere) and M.dim == 2:
            R = rotation_to(probe, np.array([0.0, 0.0, -1.0]))

            def w(u):
                s = np.sum(u * u, axis=-1)
                with np.errstate(divide="ignore"):
                    return math.log(2.0) - np.log1p(s) - np.log(phi(stereo_inverse(u, R)))

            chart = ConformalDisk(w, name=f"stereographic / {phi.name}")
            chart.to_base = lambda u: stereo_inverse(u, R)
            return chart
        if isinstance(M, HalfSpace) and M.dim == 2:

            def w(u):
                with np.errstate(divide="ignore"):
                    return -np.log(phi(u + probe))

            chart = ConformalDisk(w, name=f"flat / {phi.name}")
            chart.to_base = lambda u: u + probe
            return chart
        raise PreconditionError("chart simulation is available for 2-dimensional bases only")


@dataclass
class LocalityReport:
    base: object
    conformal: object
    difference: float
    combined_ci: float
    agree: bool
    predicted_delta: float
    matches_prediction: bool
    exit_probability: float

    def to_dict(self):
        return {"base": self.base.to_dict(), "conformal": self.conformal.to_dict(), "difference": self.difference,
                "combined_ci": self.combined_ci, "agree": self.agree, "predicted_delta": self.predicted_delta,
                "matches_prediction": self.matches_prediction, "exit_probability": self.exit_probability}


def locality_experiment(M, probe, phi, params, schedule=None, tf=None, exit_threshold=1e-3, r_check=None):
    """Curvature at ``probe`` on the base and on ``(M, phi^{-2} g)`` simulated in a chart.

    Both runs use the same seeds.  ``predicted_delta`` is the formula-level
    change of ``Ric`` along a unit vector at the probe.
    """
    from .diffusion import SimConfig, simulate_ensemble
    from .estimators import DEFAULT_SCHEDULE, chart_linear, ricci_estimate, sphere_coordinate, windowed_coordinate

    probe = M.check_point(np.asarray(probe, dtype=float))
    schedule = DEFAULT_SCHEDULE["interior"] if schedule is None else tuple(schedule)
    r_check = phi.r_in if r_check is None else r_check
    p_exit = 0.0
    if r_check is not None:
        ens = simulate_ensemble(M, probe, M.default_frame(probe), params.config(schedule[0], 99),
                                params.n_paths, workers=params.workers)
        p_exit = float(np.mean(ens.rho_max[:, -1] >= r_check))
        if p_exit > exit_threshold:
            raise PreconditionError(f"exit probability {p_exit:.3g} above {exit_threshold}")
    if tf is None:
        if isinstance(M, Sphere):
            axis = int(np.argmin(np.abs(probe)))
            tf = sphere_coordinate(M, probe, axis)
        else:
            tf = windowed_coordinate(M, probe, 0)
    base = ricci_estimate(M, tf, params, schedule)
    CM = ConformalManifold(M, phi)
    chart = CM.chart_manifold(probe)
    u0 = np.zeros(2)
    conf = ricci_estimate(chart, chart_linear(chart, u0), params, schedule)
    tc = transformed_curvature(M, phi, probe)
    base_ric = float(M.ricci_scalar(probe))
    predicted = float(tc.ric_phi_frame[0, 0]) - base_ric
    diff = conf.value - base.value
    cc = math.hypot(base.ci, conf.ci)
    return LocalityReport(base, conf, float(diff), float(cc), bool(abs(diff) <= 2 * cc), predicted,
                          bool(abs(diff - predicted) <= 2 * cc + 1e-3 * (1 + abs(predicted))), p_exit)
