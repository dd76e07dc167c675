"""Monte Carlo estimators of semigroup quantities and short-time curvature limits.

Every estimate carries a 95% interval computed from per-path influence
values, so nonlinear functionals such as ``|grad P_t f|^2`` or a sample
variance get delta-method intervals.  Antithetic pairs are averaged into one
unit before any interval is formed.

Curvature is read off the short-time limits::

    interior:  Ric_Z(grad f, grad f)(x) = lim (P_t|grad f|^p - |grad P_t f|^p) / (p t)
                                        = lim ((P_t f^2 - (P_t f)^2) / (2t) - |grad P_t f|^2) / t
    boundary:  II(grad f, grad f)(x) = lim sqrt(pi) / (2 p sqrt(t)) (P_t|grad f|^p - |grad P_t f|^p)
                                     = lim 3 sqrt(pi) / (8 sqrt(t)) ((P_t f^2 - (P_t f)^2) / (2t) - |grad P_t f|^2)

evaluated on a halving schedule and extrapolated by weighted least squares,
affine in ``t`` in the interior and affine in ``sqrt(t)`` at the boundary.
"""

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import rng
from .diffusion import SimConfig, default_workers, ensemble_keys, simulate_ensemble, simulate_from
from .errors import BudgetError, ConditioningError, FitError, PreconditionError
from .geometry import TOL_BOUNDARY, parallel_transport

Z95 = 1.959963984540054
DEFAULT_SCHEDULE = {
    "interior": tuple(0.08 * 2.0**-j for j in range(6)),
    "boundary": tuple(0.04 * 2.0**-j for j in range(6)),
}
NESTED_CAP = 10_000_000


# -- containers --------------------------------------------------------------


def _jsonable(v):
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    if isinstance(v, dict):
        return {k: _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    return v


@dataclass
class McEstimate:
    """Point estimate with a 95% half-width; ``value``/``ci`` may be vectors."""

    value: object
    ci: object
    n: int
    discards: int = 0
    method: str = ""
    extra: dict = field(default_factory=dict)

    @property
    def se(self):
        return np.asarray(self.ci) / Z95

    def to_dict(self):
        return _jsonable(asdict(self))


@dataclass
class RunParams:
    """Ensemble size and discretisation used by every estimator.

    ``n_steps`` is the number of steps per horizon; it is raised when needed
    so that ``dt <= dt_max``.
    """

    n_paths: int = 20000
    n_steps: int = 32
    seed: int = 0
    workers: int = None
    antithetic: bool = False
    dt_max: float = 1e-2

    def config(self, T, label=0):
        n = max(int(self.n_steps), int(math.ceil(T / self.dt_max - 1e-9)))
        return SimConfig(T, n, rng.derive_seed(self.seed, label))

    def with_(self, **kw):
        d = asdict(self)
        d.update(kw)
        return RunParams(**d)


def keep_mask(discarded, antithetic):
    """Per-path mask of retained paths; a pair is dropped if either member is."""
    keep = ~np.asarray(discarded, dtype=bool)
    if antithetic:
        n2 = (len(keep) // 2) * 2
        kp = keep[:n2].reshape(-1, 2).all(axis=1)
        keep = np.zeros_like(keep)
        keep[:n2] = np.repeat(kp, 2)
    return keep


def _units(discarded, antithetic, values):
    values = np.asarray(values, dtype=float)
    keep = keep_mask(discarded, antithetic)
    if antithetic:
        n2 = (len(keep) // 2) * 2
        v = values[:n2].reshape((-1, 2) + values.shape[1:]).mean(axis=1)
        return v[keep[:n2:2]]
    return values[keep]


def units(ens, values):
    """Independent units: kept paths, antithetic pairs averaged."""
    return _units(ens.discarded, ens.antithetic, values)


def _kept(ens, values):
    return np.asarray(values)[keep_mask(ens.discarded, ens.antithetic)]


def mean_estimate(ens, values, method=""):
    u = units(ens, values)
    n = u.shape[0]
    if n < 2:
        raise PreconditionError("need at least two independent samples")
    m = u.mean(axis=0)
    ci = Z95 * u.std(axis=0, ddof=1) / math.sqrt(n)
    return McEstimate(_scalar(m), _scalar(ci), n, int(ens.discarded.sum()), method)


def _influence_estimate(ens, value, influence, method=""):
    """``value`` with an interval from per-path influence values."""
    u = units(ens, influence)
    n = u.shape[0]
    ci = Z95 * u.std(ddof=1) / math.sqrt(n)
    return McEstimate(float(value), float(ci), n, int(ens.discarded.sum()), method)


def _scalar(v):
    v = np.asarray(v)
    return float(v) if v.ndim == 0 else v


def _check_discards(ens):
    ens.check_discards()


# -- test functions ----------------------------------------------------------


@dataclass
class TestFunction:
    """A smooth function with gradient oracle, certified at a probe point.

    Certification asserts ``|grad f(x)| = 1`` and ``Hess f(x) = 0`` within
    1e-8 and, at a boundary probe, ``<grad f, N>(x) = 0``.  ``hess`` maps a
    point and a frame to the matrix ``Hess f(e_i, e_j)``.
    """

    __test__ = False

    M: object
    probe: np.ndarray
    f: object
    grad: object
    hess: object = None
    name: str = ""
    certify: bool = True

    def __post_init__(self):
        self.probe = self.M.check_point(np.asarray(self.probe, dtype=float))
        if self.certify:
            self._certify()

    def _certify(self, tol=1e-8):
        M, x = self.M, self.probe
        g = self.grad(x[None])[0]
        ng = float(M.norm(x, g))
        if abs(ng - 1.0) > tol:
            raise PreconditionError(f"|grad f(x)| = {ng:.12g}, expected 1")
        if self.hess is not None:
            H = self.hess(x[None], M.default_frame(x)[None])[0]
            if np.max(np.abs(H)) > tol:
                raise PreconditionError(f"Hess f(x) is not zero (max entry {np.max(np.abs(H)):.3g})")
        if M.has_boundary:
            dist, N = M.boundary(x)
            if abs(dist) <= TOL_BOUNDARY:
                gn = float(M.inner(x, g, N))
                if abs(gn) > tol:
                    raise PreconditionError(f"<grad f, N>(x) = {gn:.3g} at a boundary probe")

    @property
    def on_boundary(self):
        if not self.M.has_boundary:
            return False
        return bool(abs(self.M.boundary(self.probe)[0]) <= TOL_BOUNDARY)

    def direction(self):
        return self.grad(self.probe[None])[0]


def sphere_coordinate(M, probe, axis=-1):
    """Ambient coordinate ``x_axis`` on a sphere or cap.

    ``grad x_k = e_k - x_k x`` and ``Hess x_k = -x_k g``, so any probe on the
    great circle ``x_k = 0`` is certified.
    """

    def f(x):
        return x[..., axis]

    def grad(x):
        e = np.zeros_like(x)
        e[..., axis] = 1.0
        return e - x[..., axis, None] * x

    def hess(x, F):
        return -x[..., axis, None, None] * np.eye(M.dim)

    return TestFunction(M, probe, f, grad, hess, f"x{axis % M.ambient}")


def _bump(u):
    inside = u < 1.0
    us = np.where(inside, u, 0.0)
    val = np.where(inside, np.exp(1.0 - 1.0 / (1.0 - us)), 0.0)
    der = np.where(inside, -val / (1.0 - us) ** 2, 0.0)
    return val, der


def windowed_coordinate(M, probe, axis=0, radius=3.0):
    """``(x_axis - p_axis) w(|x - p|)`` on a flat manifold, ``w`` a compact bump.

    The window is ``exp(1 - 1/(1 - r^2/R^2))``; its gradient vanishes at the
    probe, so the Hessian of ``f`` vanishes there exactly.
    """
    p = np.asarray(probe, dtype=float)
    R2 = float(radius) ** 2

    def f(x):
        y = x - p
        w, _ = _bump(np.sum(y * y, axis=-1) / R2)
        return y[..., axis] * w

    def grad(x):
        y = x - p
        w, dw = _bump(np.sum(y * y, axis=-1) / R2)
        g = (y[..., axis] * dw * 2.0 / R2)[..., None] * y
        g[..., axis] += w
        return g

    def hess(x, F):
        y = x - p
        w, dw = _bump(np.sum(y * y, axis=-1) / R2)
        n = M.dim
        e = np.zeros(n)
        e[axis] = 1.0
        # exact for the zero-gradient window value at the probe: only w' terms
        H = (2.0 / R2) * dw[..., None, None] * (
            e[:, None] * y[..., None, :] + y[..., :, None] * e[None, :] + y[..., axis, None, None] * np.eye(n)
        )
        return np.einsum("...in,...nm,...jm->...ij", F, H, F)

    return TestFunction(M, p, f, grad, hess, f"windowed x{axis}")


def chart_linear(M, probe, direction=(1.0, 0.0)):
    """Chart function with unit gradient and zero Hessian at ``probe`` on a ConformalDisk.

    ``f(u) = a.(u - u0) + (u - u0)^T B (u - u0) / 2`` with ``B_ij = Gamma^k_ij a_k``
    cancels the Christoffel term of the Hessian at ``u0``.
    """
    u0 = np.asarray(probe, dtype=float)
    a = np.asarray(direction, dtype=float)
    a = a / np.linalg.norm(a) * math.exp(float(M.w(u0)))
    E = np.eye(2)
    B = np.empty((2, 2))
    for i in range(2):
        for j in range(2):
            B[i, j] = M.christoffel(u0, E[i], E[j]) @ a

    def f(x):
        y = x - u0
        return y @ a + 0.5 * np.einsum("...i,ij,...j->...", y, B, y)

    def grad(x):
        y = x - u0
        return np.exp(-2.0 * M.w(x))[..., None] * (a + y @ B.T)

    return TestFunction(M, u0, f, grad, None, "chart linear")


# -- semigroup quantities ----------------------------------------------------


def _f_of(tf):
    return tf.f if isinstance(tf, TestFunction) else tf


def _grad_of(tf):
    return tf.grad if isinstance(tf, TestFunction) else tf


def _frame(M, x, U0):
    return M.default_frame(x) if U0 is None else np.asarray(U0, dtype=float)


def pt_f(M, x, f, T, params, U0=None, label=0):
    """``P_T f(x) = E f(X_T)``."""
    f = _f_of(f)
    x = M.check_point(x)
    if T == 0:
        return McEstimate(float(f(x[None])[0]), 0.0, 0, 0, "exact")
    ens = simulate_ensemble(M, x, _frame(M, x, U0), params.config(T, label), params.n_paths,
                            antithetic=params.antithetic, workers=params.workers)
    _check_discards(ens)
    return mean_estimate(ens, f(ens.X[:, -1]), "mc")


def terminal_coords(ens, grad):
    """``U_T^{-1} grad f(X_T)`` per path."""
    M = ens.manifold
    XT, UT = ens.X[:, -1], ens.U[:, -1]
    return M.frame_coords(XT, UT, grad(XT))


def bismut_vectors(ens, grad):
    """Per-path ``Q_{0,T} U_T^{-1} grad f(X_T)`` in frame coordinates at the start."""
    g = terminal_coords(ens, grad)
    return np.einsum("bij,bj->bi", ens.Q[:, -1], g), g


def grad_pt_f_bismut(M, x, f, T, params, U0=None, label=0, ens=None):
    """``grad P_T f(x) = U_0 E[Q_T U_T^{-1} grad f(X_T)]``; value is an ambient vector."""
    grad = _grad_of(f)
    x = M.check_point(x)
    U0 = _frame(M, x, U0)
    if T == 0:
        g = grad(x[None])[0]
        return McEstimate(g, np.zeros_like(g), 0, 0, "exact")
    if ens is None:
        ens = simulate_ensemble(M, x, U0, params.config(T, label), params.n_paths, track_Q=True,
                                antithetic=params.antithetic, workers=params.workers)
    _check_discards(ens)
    v, _ = bismut_vectors(ens, grad)
    u = units(ens, v)
    n = u.shape[0]
    m = u.mean(axis=0)
    C = np.cov(u, rowvar=False).reshape(M.dim, M.dim)
    amb = M.from_coords(U0, m)
    ci_amb = Z95 * np.sqrt(np.einsum("in,ij,jn->n", U0, C, U0) / n)
    return McEstimate(amb, ci_amb, n, int(ens.discarded.sum()), "bismut",
                      {"coords": m, "cov": C / n})


def _shifted_starts(M, x, U0, h):
    """Points ``exp_x(+-h e_i)`` (pushed back inside when needed) with transported frames."""
    d = M.dim
    starts, frames = [], []
    for i in range(d):
        for sgn in (1.0, -1.0):
            y = M.exp(x[None], sgn * h * U0[i][None])
            y, _ = M.reflect_once(y)
            y = M.retract(y)[0]
            starts.append(y)
            frames.append(parallel_transport(M, x, y, U0))
    return np.array(starts), np.array(frames)


def fd_difference_samples(M, x, f, T, params, U0=None, h=1e-3, label=0, evaluate=None, record_times=None):
    """Per-path central differences along ``U0`` with common random numbers.

    ``evaluate(ensemble)`` returns per-path values (default ``f(X_T)``).
    Returns ``(diffs (N, d), discard mask, keys)``.
    """
    if not (1e-4 <= h <= 1e-2):
        raise PreconditionError(f"h must lie in [1e-4, 1e-2], got {h}")
    if evaluate is None:
        fun = _f_of(f)

        def evaluate(e):
            return fun(e.X[:, -1])

    x = M.check_point(x)
    U0 = _frame(M, x, U0)
    cfg = params.config(T, label)
    keys, signs = ensemble_keys(cfg.master_seed, params.n_paths, params.antithetic)
    starts, frames = _shifted_starts(M, x, U0, h)
    d, N = M.dim, params.n_paths
    S = np.repeat(starts, N, axis=0)
    Fr = np.repeat(frames, N, axis=0)
    K = np.tile(keys, 2 * d)
    sg = None if signs is None else np.tile(signs, 2 * d)
    ens = simulate_from(M, S, Fr, K, cfg, signs=sg, workers=params.workers, record_times=record_times)
    vals = np.asarray(evaluate(ens), dtype=float).reshape(2 * d, N)
    bad = ens.discarded.reshape(2 * d, N).any(axis=0)
    diffs = np.stack([(vals[2 * i] - vals[2 * i + 1]) / (2 * h) for i in range(d)], axis=-1)
    return diffs, bad, keys


def grad_pt_f_fd(M, x, f, T, params, U0=None, h=1e-3, label=0, evaluate=None, record_times=None):
    """Central differences of ``P_T f`` (or of ``E F`` via ``evaluate``) along the frame directions (CRN)."""
    x = M.check_point(x)
    U0 = _frame(M, x, U0)
    if T == 0:
        raise PreconditionError("finite differences need T > 0")
    diffs, bad, _ = fd_difference_samples(M, x, f, T, params, U0, h, label, evaluate, record_times)
    u = _units(bad, params.antithetic, diffs)
    n = u.shape[0]
    m = u.mean(axis=0)
    C = np.cov(u, rowvar=False).reshape(M.dim, M.dim)
    if bad.mean() > 1e-3:
        raise BudgetError("discard budget exceeded in finite-difference run")
    amb = M.from_coords(U0, m)
    ci_amb = Z95 * np.sqrt(np.einsum("in,ij,jn->n", U0, C, U0) / n)
    return McEstimate(amb, ci_amb, n, int(bad.sum()), "fd", {"coords": m, "cov": C / n, "h": h})


def gradient_agreement(a, b, rel=0.05):
    """``|a - b| <= max(2 combined CI, rel |a|)`` componentwise."""
    va, vb = np.asarray(a.value), np.asarray(b.value)
    cc = np.sqrt(np.asarray(a.ci) ** 2 + np.asarray(b.ci) ** 2)
    tol = np.maximum(2.0 * cc, rel * np.linalg.norm(va))
    return bool(np.all(np.abs(va - vb) <= tol)), np.abs(va - vb), tol


# -- conditional expectations ------------------------------------------------


def conditional_expectation(F, ens, t, power=1, n_inner=64, use_oracle=True, label=0, workers=None):
    """``E(F^power | F_t)`` per outer path.

    Returns ``(values, inner_var)`` where ``inner_var`` is the per-path
    variance of the inner mean (zero when exact).  Slots at or before ``t``
    are frozen from the outer path; later slots are re-simulated from
    ``(X_t, U_t)`` with ``n_inner`` child streams.  The analytic oracle of
    ``F`` is used instead when every slot lies after ``t``.
    """
    cfg = ens.cfg
    T = cfg.T
    k_t = cfg.knot(t)
    B = len(ens.keys)
    times = np.asarray(F.times)
    if np.all(times <= t + 1e-12):
        return F.value(ens) ** power, np.zeros(B)
    j = ens.pos(t)
    Xt, Ut = ens.X[:, j], ens.U[:, j]
    if use_oracle and F.oracle is not None and np.all(times >= t - 1e-12):
        try:
            return np.asarray(F.oracle(t, Xt, power), dtype=float), np.zeros(B)
        except NotImplementedError:
            pass
    if B * n_inner > NESTED_CAP:
        raise BudgetError(f"nested budget {B} x {n_inner} exceeds {NESTED_CAP}")
    M = ens.manifold
    frozen = {i: ens.X[:, ens.pos(s)] for i, s in enumerate(times) if s <= t + 1e-12}
    late = [s - t for s in times if s > t + 1e-12]
    n_left = cfg.n_steps - k_t
    sub = SimConfig(T - t, n_left, cfg.master_seed)
    keys = np.concatenate([rng.child_keys(ens.keys, k_t, r) for r in range(n_inner)])
    starts = np.tile(Xt, (n_inner, 1))
    frames = np.tile(Ut, (n_inner, 1, 1))
    inner = simulate_from(M, starts, frames, keys, sub, record_times=late, workers=workers)
    pts = []
    for i, s in enumerate(times):
        if i in frozen:
            pts.append(np.tile(frozen[i], (n_inner, 1)))
        else:
            pts.append(inner.X[:, inner.pos(s - t)])
    vals = np.asarray(F.f(pts), dtype=float).reshape(n_inner, B) ** power
    ok = ~inner.discarded.reshape(n_inner, B)
    cnt = ok.sum(axis=0)
    if np.any(cnt < 2):
        raise ConditioningError("too many discarded continuations")
    mean = np.where(ok, vals, 0.0).sum(axis=0) / cnt
    var = np.where(ok, (vals - mean) ** 2, 0.0).sum(axis=0) / (cnt - 1)
    return mean, var / cnt


def nested_grad_sq(ens, t, grad, n_inner=64, workers=None):
    """Unbiased per-path ``|U_t^{-1} grad P_{T-t} f(X_t)|^2`` by nested Bismut runs."""
    cfg = ens.cfg
    T = cfg.T
    k_t = cfg.knot(t)
    B = len(ens.keys)
    if B * n_inner > NESTED_CAP:
        raise BudgetError(f"nested budget {B} x {n_inner} exceeds {NESTED_CAP}")
    M = ens.manifold
    j = ens.pos(t)
    Xt, Ut = ens.X[:, j], ens.U[:, j]
    sub = SimConfig(T - t, cfg.n_steps - k_t, cfg.master_seed)
    keys = np.concatenate([rng.child_keys(ens.keys, k_t, r) for r in range(n_inner)])
    inner = simulate_from(M, np.tile(Xt, (n_inner, 1)), np.tile(Ut, (n_inner, 1, 1)), keys, sub,
                          track_Q=True, workers=workers)
    v, _ = bismut_vectors(inner, grad)
    v = v.reshape(n_inner, B, M.dim)
    ok = ~inner.discarded.reshape(n_inner, B)
    cnt = ok.sum(axis=0)
    mean = np.where(ok[..., None], v, 0.0).sum(axis=0) / cnt[:, None]
    var = np.where(ok[..., None], (v - mean) ** 2, 0.0).sum(axis=(0, 2)) / (cnt - 1)
    return np.sum(mean * mean, axis=-1) - var / cnt


# -- short-time limits -------------------------------------------------------


@dataclass
class LimitFit:
    """Weighted affine fit ``a + b s`` with ``s = T`` (interior) or ``sqrt(T)`` (boundary)."""

    mode: str
    schedule: list
    values: list
    cis: list
    intercept: float
    intercept_ci: float
    slope: float
    slope_ci: float
    chi2_dof: float
    residuals: list
    cond: float

    def to_dict(self):
        return _jsonable(asdict(self))


def fit_limit(schedule, values, cis, mode="interior", max_cond=1e8, degree=1):
    """Weighted least squares with weights ``1/CI^2``.

    Intervals are inflated by ``sqrt(chi2/dof)`` when the scatter exceeds the
    stated errors.  ``degree=2`` adds a quadratic term in the fit variable
    (used as a diagnostic of the affine model's bias).
    """
    T = np.asarray(schedule, dtype=float)
    y = np.asarray(values, dtype=float)
    ci = np.asarray(cis, dtype=float)
    if len(T) < 4:
        raise FitError("need at least four schedule points")
    if np.any(np.diff(T) >= 0):
        raise FitError("schedule must be strictly decreasing")
    if mode not in ("interior", "boundary"):
        raise FitError(f"unknown mode {mode!r}")
    s = T if mode == "interior" else np.sqrt(T)
    se = ci / Z95
    if not np.all(se > 0):
        # deterministic values (or a degenerate interval): fall back to equal weights
        se = np.ones_like(y)
    X = np.stack([s**k for k in range(degree + 1)], axis=1)
    Xw = X / se[:, None]
    yw = y / se
    cond = float(np.linalg.cond(Xw))
    if not np.isfinite(cond) or cond > max_cond:
        raise FitError(f"fit condition number {cond:.3g} too large")
    coef, *_ = np.linalg.lstsq(Xw, yw, rcond=None)
    cov = np.linalg.inv(Xw.T @ Xw)
    res = y - X @ coef
    dof = len(T) - degree - 1
    chi2 = float(np.sum((res / se) ** 2) / dof)
    infl = math.sqrt(max(1.0, chi2)) if np.all(ci > 0) else math.sqrt(chi2)
    return LimitFit(mode, T.tolist(), y.tolist(), ci.tolist(), float(coef[0]),
                    float(Z95 * infl * math.sqrt(cov[0, 0])), float(coef[1]),
                    float(Z95 * infl * math.sqrt(cov[1, 1])), chi2, res.tolist(), cond)


def short_time_limit(evaluator, mode="interior", schedule=None):
    """Evaluate ``evaluator(T) -> McEstimate`` on the schedule and extrapolate to 0."""
    schedule = DEFAULT_SCHEDULE[mode] if schedule is None else schedule
    ests = [evaluator(T) for T in schedule]
    return fit_limit(schedule, [e.value for e in ests], [e.ci for e in ests], mode)


# -- curvature ---------------------------------------------------------------


def _norm_p_stats(vu, p):
    """``|mean|^p`` with first-order bias removed, and its gradient in the mean."""
    n = vu.shape[0]
    m = vu.mean(axis=0)
    C = np.cov(vu, rowvar=False).reshape(m.size, m.size) / n
    r2 = float(m @ m)
    if r2 <= 0:
        return 0.0, np.zeros_like(m)
    r = math.sqrt(r2)
    val = r**p
    bias = 0.5 * p * r ** (p - 2) * (np.trace(C) + (p - 2) * float(m @ C @ m) / r2)
    return val - bias, p * r ** (p - 2) * m


def curvature_terms(ens, tf, p=2, mode="interior", fd=None):
    """Gradient-form and variance-form quantities at one horizon.

    ``fd`` optionally supplies ``(per-path FD vectors, mask)`` aligned with the
    ensemble keys to replace the Bismut vectors.
    """
    T = ens.cfg.T
    if fd is None:
        v, g = bismut_vectors(ens, tf.grad)
    else:
        v, _bad = fd
        g = terminal_coords(ens, tf.grad)
    fT = tf.f(ens.X[:, -1])
    gp = np.sum(g * g, axis=-1) ** (p / 2)
    vu = units(ens, v)
    n = vu.shape[0]
    vk, gpk, fk = _kept(ens, v), _kept(ens, gp), _kept(ens, fT)
    # gradient form
    normp, dnorm = _norm_p_stats(vu, p)
    G = gpk.mean() - normp
    inf_G = gp - v @ dnorm
    # variance form: (Var f / (2T) - |grad P f|^2)
    norm2, dnorm2 = _norm_p_stats(vu, 2)
    fbar = fk.mean()
    V = np.var(fk, ddof=1) / (2 * T) - norm2
    inf_V = (fT - fbar) ** 2 / (2 * T) - v @ dnorm2
    inf_G, inf_V = units(ens, inf_G), units(ens, inf_V)
    if mode == "interior":
        cg, cv = 1.0 / (p * T), 1.0 / T
    else:
        cg, cv = math.sqrt(math.pi) / (2 * p * math.sqrt(T)), 3 * math.sqrt(math.pi) / (8 * math.sqrt(T))
    ci_g = Z95 * cg * np.std(inf_G, ddof=1) / math.sqrt(n)
    ci_v = Z95 * cv * np.std(inf_V, ddof=1) / math.sqrt(n)
    disc = int(ens.discarded.sum())
    return {
        "gradient": McEstimate(float(cg * G), float(ci_g), n, disc, f"gradient-form p={p}"),
        "variance": McEstimate(float(cv * V), float(ci_v), n, disc, "variance-form"),
    }


@dataclass
class CurvatureReport:
    quantity: str
    probe: list
    direction: list
    value: float
    ci: float
    method: str
    fits: dict
    per_T: dict
    consistent: bool
    grad_method: str = "bismut"
    p: float = 2.0
    truth: float = None

    def to_dict(self):
        d = asdict(self)
        d["fits"] = {k: v.to_dict() if hasattr(v, "to_dict") else v for k, v in self.fits.items()}
        return _jsonable(d)

    def to_json(self, **kw):
        return json.dumps(self.to_dict(), **kw)

    def form(self, name):
        f = self.fits[name]
        return f.intercept, f.intercept_ci


def _curvature_run(M, tf, params, schedule, p, mode, quantity, grad_method, fd_h=1e-3):
    x = tf.probe
    U0 = M.default_frame(x)
    per = {"gradient": [], "variance": []}
    for j, T in enumerate(schedule):
        cfg = params.config(T, j)
        ens = simulate_ensemble(M, x, U0, cfg, params.n_paths, track_Q=grad_method == "bismut",
                                antithetic=params.antithetic, workers=params.workers)
        _check_discards(ens)
        fd = None
        if grad_method == "fd":
            diffs, bad, _ = fd_difference_samples(M, x, tf, T, params, U0, fd_h, j)
            fd = (diffs, bad)
            ens.discarded = ens.discarded | bad
        terms = curvature_terms(ens, tf, p, mode, fd)
        for k in per:
            per[k].append(terms[k])
    fits = {k: fit_limit(schedule, [e.value for e in v], [e.ci for e in v], mode) for k, v in per.items()}
    g = per["gradient"]
    fits["gradient_quadratic"] = fit_limit(schedule, [e.value for e in g], [e.ci for e in g], mode, degree=2)
    a, b = fits["gradient"], fits["variance"]
    cc = math.hypot(a.intercept_ci, b.intercept_ci)
    consistent = abs(a.intercept - b.intercept) <= 3 * cc
    per_T = {k: [e.to_dict() for e in v] for k, v in per.items()}
    return CurvatureReport(quantity, x.tolist(), tf.direction().tolist(), a.intercept, a.intercept_ci,
                           f"gradient-form p={p}", fits, per_T, bool(consistent), grad_method, p)


def ricci_estimate(M, tf, params, schedule=None, p=2, grad_method="bismut"):
    """``Ric_Z(grad f, grad f)(x)`` at an interior probe from both forms of the limit."""
    if tf.on_boundary:
        raise PreconditionError("ricci_estimate needs an interior probe")
    schedule = DEFAULT_SCHEDULE["interior"] if schedule is None else tuple(schedule)
    return _curvature_run(M, tf, params, schedule, p, "interior", "ricci", grad_method)


def second_form_estimate(M, tf, params, schedule=None, p=2, grad_method="bismut"):
    """``II(grad f, grad f)(x)`` at a boundary probe, ``grad f`` tangent to the boundary."""
    if not tf.on_boundary:
        raise PreconditionError("second_form_estimate needs a boundary probe")
    schedule = DEFAULT_SCHEDULE["boundary"] if schedule is None else tuple(schedule)
    return _curvature_run(M, tf, params, schedule, p, "boundary", "second_form", grad_method)


# -- random measure limits ---------------------------------------------------


def mu_expectation(M, x, bounds, T, params, label=0):
    ens = simulate_ensemble(M, x, M.default_frame(x), params.config(T, label), params.n_paths,
                            bounds=bounds, antithetic=params.antithetic, workers=params.workers)
    _check_discards(ens)
    return mean_estimate(ens, ens.mu_cum[:, -1], "mu([0,T])")


def mu_limit_interior(M, x, bounds, params, schedule=None):
    """Fit of ``E mu([0,T]) / T``; the intercept estimates ``K(x)``."""
    schedule = DEFAULT_SCHEDULE["interior"] if schedule is None else tuple(schedule)
    ests = [mu_expectation(M, x, bounds, T, params, j) for j, T in enumerate(schedule)]
    return fit_limit(schedule, [e.value / T for e, T in zip(ests, schedule)],
                     [e.ci / T for e, T in zip(ests, schedule)], "interior")


def mu_sqrt_limits(M, x, bounds, params, schedule=None):
    """Fits of ``E mu([0,T]) / sqrt(T)`` (limit ``2 sigma(x)/sqrt(pi)``) and ``(E mu)^2 / sqrt(T)`` (limit 0)."""
    schedule = DEFAULT_SCHEDULE["boundary"] if schedule is None else tuple(schedule)
    ests = [mu_expectation(M, x, bounds, T, params, j) for j, T in enumerate(schedule)]
    r = [math.sqrt(T) for T in schedule]
    first = fit_limit(schedule, [e.value / s for e, s in zip(ests, r)], [e.ci / s for e, s in zip(ests, r)],
                      "boundary")
    second = fit_limit(schedule, [e.value**2 / s for e, s in zip(ests, r)],
                       [2 * abs(e.value) * e.ci / s for e, s in zip(ests, r)], "boundary")
    return first, second


# -- martingale isometry -----------------------------------------------------


@dataclass
class IsometryReport:
    eps: float
    T: float
    lhs: McEstimate
    rhs: McEstimate
    agree: bool
    normalized: dict

    def to_dict(self):
        return _jsonable({"eps": self.eps, "T": self.T, "lhs": self.lhs.to_dict(), "rhs": self.rhs.to_dict(),
                          "agree": self.agree, "normalized": self.normalized})


def martingale_isometry(M, x, F, grad, eps, params, n_outer=2000, n_inner=64, n_nodes=5,
                        use_oracle=True):
    """Both sides of ``Var E(F | F_eps) = 2 int_0^eps E|U_s^{-1} grad P_{T-s} f(X_s)|^2 ds``.

    ``F`` is a terminal cylindric function ``f(gamma_T)`` and ``grad`` the
    gradient of ``f``.  The left side uses the outer ensemble with
    ``E(F | F_eps)`` from the oracle (or nested runs); the right side uses
    nested Bismut estimates at ``n_nodes`` trapezoid nodes on ``[0, eps]``.
    """
    T = F.times[-1]
    x = M.check_point(x)
    U0 = M.default_frame(x)
    cfg = params.config(T, 0)
    k_eps = cfg.knot(eps)
    if (k_eps % (n_nodes - 1)) != 0:
        raise PreconditionError("eps must split into n_nodes - 1 grid intervals")
    nodes = [cfg.dt * k_eps * i / (n_nodes - 1) for i in range(n_nodes)]
    ens = simulate_ensemble(M, x, U0, cfg, params.n_paths, record_times=nodes + [T],
                            antithetic=params.antithetic, workers=params.workers)
    _check_discards(ens)
    G, gv = conditional_expectation(F, ens, eps, 1, n_inner, use_oracle, workers=params.workers)
    Gk = _kept(ens, G)
    lhs_val = float(np.var(Gk, ddof=1) - _kept(ens, gv).mean())
    lhs = _influence_estimate(ens, lhs_val, (G - Gk.mean()) ** 2, "variance of E(F|F_eps)")
    # right side: nested Bismut on a sub-ensemble of outer paths
    sub = ens.subset(np.arange(len(ens.keys)) < n_outer)
    sub.antithetic = False
    w = np.full(n_nodes, 1.0)
    w[0] = w[-1] = 0.5
    h = nodes[1] - nodes[0]
    acc = np.zeros(len(sub.keys))
    for wi, s in zip(w, nodes):
        acc = acc + wi * h * nested_grad_sq(sub, s, grad, n_inner, params.workers)
    rhs_samples = 2.0 * acc
    rhs = mean_estimate(sub, rhs_samples, "2 int |grad P f|^2")
    cc = math.hypot(lhs.ci, rhs.ci)
    agree = abs(lhs.value - rhs.value) <= cc
    norm = {"lhs_over_2eps": lhs.value / (2 * eps), "rhs_over_2eps": rhs.value / (2 * eps)}
    return IsometryReport(eps, T, lhs, rhs, bool(agree), norm)


def variance_short_time(M, x, tf, eps, params, label=0):
    """``(P_eps f^2 - (P_eps f)^2) / eps``, which tends to ``2 |grad f|^2(x)``."""
    ens = simulate_ensemble(M, x, M.default_frame(x), params.config(eps, label), params.n_paths,
                            antithetic=params.antithetic, workers=params.workers)
    fT = tf.f(ens.X[:, -1])
    fk = _kept(ens, fT)
    val = np.var(fk, ddof=1) / eps
    return _influence_estimate(ens, val, (fT - fk.mean()) ** 2 / eps, "variance/eps")


# -- integrability diagnostic ------------------------------------------------


def integrability_diagnostic(ens, eps=0.5):
    """Sample mean of ``exp((2 + eps) A_T)`` and a heavy-tail flag.

    The flag is raised when the effective sample size of the weights falls
    below half the ensemble.
    """
    if ens.A is None:
        raise PreconditionError("ensemble was simulated without bounds")
    w = np.exp((2.0 + eps) * ens.A[ens.kept, -1])
    n = len(w)
    ess = float(w.sum() ** 2 / np.sum(w * w))
    return {
        "eps": eps,
        "mean": float(w.mean()),
        "ci": float(Z95 * w.std(ddof=1) / math.sqrt(n)),
        "ess_fraction": ess / n,
        "heavy_tail": bool(ess < 0.5 * n),
    }


def workers_default():
    return default_workers()
