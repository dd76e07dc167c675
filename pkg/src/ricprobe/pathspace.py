"""Cylindric path functionals, their gradients, the random measure and the energy form.

A cylindric function ``F(gamma) = f(gamma_{t_1}, ..., gamma_{t_m})`` is
evaluated on an ensemble that recorded the slot times.  Slot gradients are
pulled back to frame coordinates, ``g_i = U_{t_i}^{-1} grad_i f``, and the
Malliavin derivative is the tail sum::

    Ddot_s F = sum_{t_i > s} g_i

which is constant between consecutive slot times.  The random measure
``mu(ds) = exp(A(s)) (K ds + sigma dl)`` is discretised with left-point
quadrature on the simulation grid, the ``dl`` mass of a step sitting at the
step's left knot, so ``mu([a, b]) = mu_cum(b) - mu_cum(a)``.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import PreconditionError
from .transport import evolve_Q, normal_projection


# -- cutoff ------------------------------------------------------------------


def smoothstep7(u):
    """Degree-7 smoothstep: 0 at u <= 0, 1 at u >= 1, C^3 at both ends."""
    u = np.clip(u, 0.0, 1.0)
    return u**4 * (35.0 - 84.0 * u + 70.0 * u**2 - 20.0 * u**3)


def smoothstep7_prime(u):
    inside = (u > 0) & (u < 1)
    u = np.clip(u, 0.0, 1.0)
    return np.where(inside, 140.0 * u**3 * (1.0 - u) ** 3, 0.0)


@dataclass
class Cutoff:
    """``ell(s) = 1 - smoothstep7((s - r_in) / (r_out - r_in))``."""

    r_in: float
    r_out: float
    center: np.ndarray = None  # defaults to the path start

    def __post_init__(self):
        if not (0 < self.r_in < self.r_out):
            raise PreconditionError("need 0 < r_in < r_out")

    def ell(self, s):
        return 1.0 - smoothstep7((np.asarray(s) - self.r_in) / (self.r_out - self.r_in))

    def ell_prime(self, s):
        w = self.r_out - self.r_in
        return -smoothstep7_prime((np.asarray(s) - self.r_in) / w) / w


@dataclass
class CutoffValue:
    phi: np.ndarray  # Phi per path
    slope: np.ndarray  # |ell'(rho_tilde)|, the size of the Malliavin derivative of Phi
    argmax_time: np.ndarray
    rho_tilde: np.ndarray


# -- cylindric functions -----------------------------------------------------


@dataclass
class CylindricFunction:
    """``F = f(gamma_{t_1}, ..., gamma_{t_m})`` with slot gradients.

    ``f(points)`` takes a list of ``m`` arrays ``(B, n)`` and returns ``(B,)``;
    ``grads(points)`` returns the list of Riemannian gradients ``(B, n)``, the
    ``i``-th taken in the ``i``-th slot.  ``oracle`` optionally maps
    ``(t, X_t, power)`` to the exact ``E(F^power | F_t)`` for ``t`` before
    the first slot.
    """

    times: tuple
    f: object
    grads: object
    cutoff: Cutoff = None
    oracle: object = None
    description: str = ""

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        if t.ndim != 1 or len(t) < 1 or np.any(np.diff(t) <= 0) or t[0] < 0:
            raise PreconditionError(f"slot times must be strictly increasing and >= 0, got {self.times}")
        self.times = tuple(float(s) for s in t)

    @property
    def m(self):
        return len(self.times)

    def slot_points(self, paths):
        return [paths.X[..., paths.pos(t), :] for t in self.times]

    def value(self, paths):
        return np.asarray(self.f(self.slot_points(paths)), dtype=float)

    def slot_coords(self, paths):
        """``g_i = U_{t_i}^{-1} grad_i f``, shape ``(..., m, d)``."""
        M = paths.manifold
        pts = self.slot_points(paths)
        gr = self.grads(pts)
        out = []
        for t, x, g in zip(self.times, pts, gr):
            U = paths.U[..., paths.pos(t), :, :]
            out.append(M.frame_coords(x, U, np.asarray(g, dtype=float)))
        return np.stack(out, axis=-2)

    def shifted(self, c):
        """``F + c`` (used to keep ``F^2`` away from zero)."""
        f = self.f
        orc = None
        if self.oracle is not None:
            o = self.oracle

            def orc(t, x, power):
                if power == 1:
                    return o(t, x, 1) + c
                return o(t, x, 2) + 2 * c * o(t, x, 1) + c * c

        return CylindricFunction(self.times, lambda pts: f(pts) + c, self.grads, self.cutoff, orc,
                                 f"{self.description} + {c:g}")

    @classmethod
    def terminal(cls, T, f, grad, oracle=None, description="f(gamma_T)"):
        return cls((T,), lambda pts: f(pts[0]), lambda pts: [grad(pts[0])], oracle=oracle,
                   description=description)


def sphere_coordinate_functional(d, T, axis=-1, shift=0.0):
    """``F = shift + x_axis(gamma_T)`` on the unit sphere ``S^d``, with its exact oracle.

    ``x_axis`` is a degree-one spherical harmonic, ``P_s x = exp(-d s) x`` and
    ``P_s x^2 = 1/(d+1) + exp(-2(d+1) s)(x^2 - 1/(d+1))``.
    """
    lam1, lam2, c0 = float(d), 2.0 * (d + 1), 1.0 / (d + 1)

    def f(x):
        return x[..., axis] + shift

    def grad(x):
        e = np.zeros_like(x)
        e[..., axis] = 1.0
        return e - x[..., axis, None] * x

    def oracle(t, x, power):
        s = T - t
        z = x[..., axis]
        m1 = np.exp(-lam1 * s) * z
        if power == 1:
            return m1 + shift
        m2 = c0 + np.exp(-lam2 * s) * (z * z - c0)
        return m2 + 2 * shift * m1 + shift * shift

    return CylindricFunction.terminal(T, f, grad, oracle, f"{shift:g} + x{axis % (d + 1)}(gamma_T)")


# -- random measure ----------------------------------------------------------


def _mu_cum(paths, bounds=None):
    if bounds is not None and paths.bounds is not bounds:
        from .diffusion import with_bounds

        paths = with_bounds(paths, bounds)
    if paths.mu_cum is None:
        raise PreconditionError("paths were simulated without bounds; pass bounds or simulate with them")
    return paths.mu_cum, paths


def mu_mass(paths, a, b, bounds=None):
    """``mu([a, b])`` per path (left-point quadrature on the grid)."""
    if b < a:
        raise PreconditionError("empty interval")
    mu, paths = _mu_cum(paths, bounds)
    return mu[..., paths.pos(b)] - mu[..., paths.pos(a)]


def mu_closed_form(paths, a, b, bounds=None):
    """``exp(A(b)) - exp(A(a))``, the continuum value of ``mu([a, b])``."""
    _mu, paths = _mu_cum(paths, bounds)
    return np.exp(paths.A[..., paths.pos(b)]) - np.exp(paths.A[..., paths.pos(a)])


# -- gradients ---------------------------------------------------------------


def _tail(g, times, s, left=False):
    t = np.asarray(times)
    sel = t >= s if left else t > s
    return g[..., sel, :].sum(axis=-2)


def malliavin_dot(F, paths, s, project=False, left=False):
    """``Ddot_s F = sum_{t_i > s} U_{t_i}^{-1} grad_i f``.

    ``project`` left-multiplies by ``I - 1_{X_s in boundary} P_{U_s}``.
    ``left`` takes the left limit in ``s`` (``t_i >= s``).
    """
    T = paths.cfg.T
    if s > T + 1e-12:
        raise PreconditionError(f"s = {s} exceeds the horizon {T}")
    D = _tail(F.slot_coords(paths), F.times, s, left)
    if project:
        D = _project(paths, s, D)
    return D


def _project(paths, s, D):
    M = paths.manifold
    if not M.has_boundary:
        return D
    j = paths.pos(s)
    X, U = paths.X[..., j, :], paths.U[..., j, :, :]
    dist, _ = M.boundary(X)
    on = np.abs(dist) <= 1e-9
    if not np.any(on):
        return D
    P = normal_projection(M, X, U)
    PD = np.einsum("...ij,...j->...i", P, D)
    return np.where(on[..., None], D - PD, D)


def damped_dot(F, paths, s, Q=None):
    """``Dtilde_s F = sum_{t_i > s} Q_{s, t_i} U_{t_i}^{-1} grad_i f``.

    ``Q`` is a :class:`DampedTransport` from knot ``s``; at ``s = 0`` the
    online matrices of the ensemble are used when available.
    """
    g = F.slot_coords(paths)
    k_s = paths.cfg.knot(s)
    out = 0.0
    if Q is None and k_s == 0 and paths.Q is not None:
        def Qt(t):
            return paths.Q[..., paths.pos(t), :, :]
    else:
        Q = evolve_Q(paths, paths.manifold, k_s) if Q is None else Q

        def Qt(t):
            return Q.at(paths.cfg.knot(t))
    for i, t in enumerate(F.times):
        if t > s:
            out = out + np.einsum("...ij,...j->...i", Qt(t), g[..., i, :])
    if np.isscalar(out):
        out = np.zeros(g.shape[:-2] + (g.shape[-1],))
    return out


def bismut_path_gradient(F, paths):
    """Per-path summands of ``sum_i Q_{0,t_i} U_{t_i}^{-1} grad_i f`` (frame coords at 0)."""
    return damped_dot(F, paths, 0.0)


# -- energy form -------------------------------------------------------------


def energy_integrand(F, paths, s, bounds=None, power=2, left=False, g=None, project=False):
    """Per-path ``(1 + mu([s,T])) (|Ddot_s F|^q + int_s^T |Ddot_r F|^q mu(dr))`` pieces.

    Returns ``(weight, head, tail)`` with ``weight = 1 + mu([s, T])``,
    ``head = |Ddot_s F|^q`` and ``tail = int_s^T |Ddot_r F|^q mu(dr)``.
    """
    mu, paths = _mu_cum(paths, bounds)
    if g is None:
        g = F.slot_coords(paths)
    T = paths.cfg.T
    jT, js = paths.pos(T), paths.pos(s)
    D = _tail(g, F.times, s, left)
    if project:
        D = _project(paths, s, D)
    head = np.sum(D * D, axis=-1) ** (power / 2)
    tail = np.zeros(head.shape)
    lo = js
    for i, t in enumerate(F.times):
        if t < s or (t == s and not left):
            continue
        hi = paths.pos(t)
        Dr = g[..., i:, :].sum(axis=-2)
        tail = tail + np.sum(Dr * Dr, axis=-1) ** (power / 2) * (mu[..., hi] - mu[..., lo])
        lo = hi
    weight = 1.0 + mu[..., jT] - mu[..., js]
    return weight, head, tail


@dataclass
class EnergyFormValue:
    value: float
    ci: float
    n: int
    samples: np.ndarray = field(default=None, repr=False)


def energy_form(F, paths, t, bounds=None, left=False):
    """Ensemble estimate of ``E^{K,sigma}_{t,T}(F, F)`` with a 95% interval."""
    if len(paths.keys) == 0:
        raise PreconditionError("empty ensemble")
    w, h, tl = energy_integrand(F, paths, t, bounds, 2, left)
    x = (w * (h + tl))[paths.kept]
    n = len(x)
    ci = 1.96 * np.std(x, ddof=1) / np.sqrt(n) if n > 1 else np.inf
    return EnergyFormValue(float(np.mean(x)), float(ci), n, x)


def pathwise_damped_bound(F, paths, s, bounds=None, Q=None):
    """``(|Dtilde_s F|^2, (1 + mu([s,T]))(|Ddot_s F|^2 + int |Ddot|^2 dmu))`` per path.

    The first never exceeds the second on manifolds without boundary (summation
    by parts plus Cauchy-Schwarz).  With boundary the projection jumps of
    ``Q`` are not controlled by ``mu`` and the comparison only holds on average.
    """
    Dt = damped_dot(F, paths, s, Q)
    w, h, tl = energy_integrand(F, paths, s, bounds, 2)
    return np.sum(Dt * Dt, axis=-1), w * (h + tl)


def cutoff_value(F, paths):
    """``Phi = ell(max_k rho(X_k, center))`` and the size of its derivative."""
    c = F.cutoff
    if c is None:
        return CutoffValue(np.ones(len(paths.keys)), np.zeros(len(paths.keys)), np.zeros(len(paths.keys)),
                           np.zeros(len(paths.keys)))
    if c.center is None or np.allclose(c.center, paths.start[0]):
        if not np.allclose(paths.start, paths.start[0]):
            raise PreconditionError("cutoff without centre needs a common start")
        rho, arg = paths.rho_max[..., -1], paths.rho_arg[..., -1]
    else:
        if not paths.full:
            raise PreconditionError("an off-start cutoff centre needs fully recorded paths")
        r = paths.manifold.distance(np.asarray(c.center)[None, None, :], paths.X)
        arg = np.argmax(r, axis=-1)
        rho = np.max(r, axis=-1)
    return CutoffValue(c.ell(rho), np.abs(c.ell_prime(rho)), arg * paths.cfg.dt, rho)



def _coord_grad(x, axis):
    e = np.zeros_like(x)
    e[..., axis] = 1.0
    return e - x[..., axis, None] * x


def sphere_linear_functional(d, times, coefs, axis=-1):
    """``F = sum_i c_i x_axis(gamma_{t_i})`` on ``S^d``.

    For ``t`` up to the first slot, ``E(F | F_t) = sum_i c_i exp(-d (t_i - t)) x_axis(X_t)``.
    """
    times = tuple(float(t) for t in times)
    coefs = tuple(float(c) for c in coefs)

    def f(pts):
        return sum(c * p[..., axis] for c, p in zip(coefs, pts))

    def grads(pts):
        return [c * _coord_grad(p, axis) for c, p in zip(coefs, pts)]

    def oracle(t, x, power):
        if power != 1 or t > times[0] + 1e-12:
            raise NotImplementedError
        return sum(c * np.exp(-d * (s - t)) for c, s in zip(coefs, times)) * x[..., axis]

    desc = " + ".join(f"{c:g} x{axis % (d + 1)}(gamma_{s:g})" for c, s in zip(coefs, times))
    return CylindricFunction(times, f, grads, oracle=oracle, description=desc)


def sphere_product_functional(t1, t2, axis1=0, axis2=-1):
    """``F = x_axis1(gamma_{t1}) x_axis2(gamma_{t2})`` on a sphere."""

    def f(pts):
        return pts[0][..., axis1] * pts[1][..., axis2]

    def grads(pts):
        a, b = pts
        return [b[..., axis2, None] * _coord_grad(a, axis1), a[..., axis1, None] * _coord_grad(b, axis2)]

    return CylindricFunction((t1, t2), f, grads, description=f"x{axis1}(gamma_{t1:g}) x{axis2}(gamma_{t2:g})")
