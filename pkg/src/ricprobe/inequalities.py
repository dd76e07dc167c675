"""Numerical checks of the gradient, log-Sobolev and Poincare inequalities.

Each checker simulates one ensemble and evaluates both sides on it (common
random numbers), so the margin ``rhs - lhs`` has an interval built from
paired per-path influence values.  Verdicts follow::

    PASS          margin >= -2 c
    FAIL          margin < -2 c and |margin| > 3 c
    INCONCLUSIVE  otherwise

where ``c`` is the 95% half-width of the margin.
"""

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .diffusion import simulate_ensemble
from .errors import ConditioningError, PreconditionError
from .estimators import (
    Z95,
    McEstimate,
    _jsonable,
    _kept,
    _norm_p_stats,
    bismut_vectors,
    conditional_expectation,
    gradient_agreement,
    grad_pt_f_bismut,
    grad_pt_f_fd,
    terminal_coords,
    units,
)
from .pathspace import cutoff_value, damped_dot, energy_integrand, mu_mass

PASS, FAIL, INCONCLUSIVE = "PASS", "FAIL", "INCONCLUSIVE"


def verdict(margin, ci):
    if margin >= -2.0 * ci:
        return PASS
    if abs(margin) > 3.0 * ci:
        return FAIL
    return INCONCLUSIVE


@dataclass
class InequalityReport:
    name: str
    lhs: McEstimate
    rhs: McEstimate
    margin: float
    margin_ci: float
    verdict: str
    params: dict = field(default_factory=dict)
    negative_control: bool = False

    def to_dict(self):
        d = asdict(self)
        d["lhs"] = self.lhs.to_dict()
        d["rhs"] = self.rhs.to_dict()
        return _jsonable(d)

    def row(self):
        return {"name": self.name, "margin": self.margin, "ci": self.margin_ci, "verdict": self.verdict,
                "params": _jsonable(self.params)}


def _report(name, ens, lhs_val, lhs_inf, rhs_samples, params, negative_control=False, band=0.0):
    """Assemble a report from per-path influence values of both sides."""
    lu = units(ens, lhs_inf)
    ru = units(ens, rhs_samples)
    n = ru.shape[0]
    rhs_val = float(ru.mean())
    lhs_ci = float(Z95 * lu.std(ddof=1) / math.sqrt(n))
    rhs_ci = float(Z95 * ru.std(ddof=1) / math.sqrt(n))
    m_ci = float(Z95 * (ru - lu).std(ddof=1) / math.sqrt(n))
    margin = rhs_val - float(lhs_val)
    disc = int(ens.discarded.sum())
    lhs = McEstimate(float(lhs_val), lhs_ci, n, disc, "lhs")
    rhs = McEstimate(rhs_val, rhs_ci, n, disc, "rhs")
    v = verdict(margin + band, m_ci)
    params = dict(params)
    if band:
        params["correction_band"] = band
    return InequalityReport(name, lhs, rhs, margin, m_ci, v, params, negative_control)


def _ensemble(M, x, T, bounds, params, record_times=None, label=0):
    x = M.check_point(x)
    ens = simulate_ensemble(M, x, M.default_frame(x), params.config(T, label), params.n_paths,
                            record_times=record_times, bounds=bounds, track_Q=True,
                            antithetic=params.antithetic, workers=params.workers)
    ens.check_discards()
    return ens


def _common(M, x, T, bounds, params, extra=None):
    d = {"manifold": repr(M), "probe": np.asarray(x).tolist(), "T": T, "bounds": bounds.describe(),
         "n_paths": params.n_paths, "seed": params.seed}
    if extra:
        d.update(extra)
    return d


def check_gradient_ineq_1(M, x, tf, T, p, bounds, params, cross_check=False, negative_control=False, ens=None):
    """``|grad P_T f|^p(x) <= E[(1 + mu([0,T]))^p |grad f|^p(X_T)]``."""
    if not 1 <= p <= 2:
        raise PreconditionError("p must lie in [1, 2]")
    ens = _ensemble(M, x, T, bounds, params) if ens is None else ens
    v, g = bismut_vectors(ens, tf.grad)
    vu = units(ens, v)
    lhs, dl = _norm_p_stats(vu, p)
    mu = ens.mu_cum[:, -1]
    rhs = (1.0 + mu) ** p * np.sum(g * g, axis=-1) ** (p / 2)
    info = _common(M, x, T, bounds, params, {"p": p, "F": "f(gamma_T)"})
    if cross_check:
        b = grad_pt_f_bismut(M, x, tf, T, params, ens=ens)
        fd = grad_pt_f_fd(M, x, tf, T, params.with_(n_paths=min(params.n_paths, 20000)))
        ok, _, _ = gradient_agreement(b, fd)
        info["fd_cross_check"] = {"bismut": b.value, "fd": fd.value, "agree": ok}
    return _report("gradient-1", ens, lhs, v @ dl, rhs, info, negative_control)


def check_gradient_ineq_2(M, x, tf, T, q, bounds, params, negative_control=False, ens=None):
    """``|grad f(x) - grad P_T f(x)/2|^q <= E[(1+mu)^{q-1}(|grad f(x) - U_0 U_T^{-1} grad f(X_T)/2|^q + mu 2^{-q} |grad f(X_T)|^q)]``."""
    if not 1 <= q <= 2:
        raise PreconditionError("q must lie in [1, 2]")
    ens = _ensemble(M, x, T, bounds, params) if ens is None else ens
    x = np.asarray(x, dtype=float)
    U0 = M.default_frame(x)
    a0 = M.frame_coords(x, U0, tf.grad(x[None])[0])
    v, g = bismut_vectors(ens, tf.grad)
    w = a0 - 0.5 * v
    lhs, dl = _norm_p_stats(units(ens, w), q)
    mu = ens.mu_cum[:, -1]
    a = a0 - 0.5 * g
    rhs = (1.0 + mu) ** (q - 1) * (np.sum(a * a, axis=-1) ** (q / 2)
                                   + mu * 2.0**-q * np.sum(g * g, axis=-1) ** (q / 2))
    info = _common(M, x, T, bounds, params, {"q": q, "F": "f(gamma_T)"})
    return _report("gradient-2", ens, lhs, w @ dl, rhs, info, negative_control)


def check_pathspace_gradient(M, x, F, T, q, bounds, params, cross_check=False, negative_control=False):
    """``|grad_x E F|^q <= E[(1+mu([0,T]))^{q-1}(|Ddot_0 F|^q + int_0^T |Ddot_s F|^q mu(ds))]``.

    The left side uses ``sum_i E[Q_{0,t_i} U_{t_i}^{-1} grad_i f]``.
    """
    if F.m > 3:
        raise PreconditionError("at most three slots")
    ens = _ensemble(M, x, T, bounds, params, record_times=list(F.times))
    b = damped_dot(F, ens, 0.0)
    lhs, dl = _norm_p_stats(units(ens, b), q)
    w, head, tail = energy_integrand(F, ens, 0.0, power=q)
    rhs = w ** (q - 1) * (head + tail)
    info = _common(M, x, T, bounds, params, {"q": q, "F": F.description, "slots": list(F.times)})
    if cross_check:
        xm = np.asarray(x, dtype=float)
        U0 = M.default_frame(xm)
        bis = units(ens, b).mean(axis=0)
        fd = grad_pt_f_fd(M, xm, None, T, params.with_(n_paths=min(params.n_paths, 20000)),
                          evaluate=F.value, record_times=list(F.times))
        bv = McEstimate(M.from_coords(U0, bis), np.zeros(M.ambient), len(ens.keys))
        ok, _, _ = gradient_agreement(bv, fd)
        info["fd_cross_check"] = {"bismut": bv.value, "fd": fd.value, "fd_ci": fd.ci, "agree": ok}
    return _report("pathspace-gradient", ens, lhs, b @ dl, rhs, info, negative_control)


def _nodes(a, b, n):
    return [a + (b - a) * i / (n - 1) for i in range(n)]


def _trapezoid_energy(F, ens, a, b, n_nodes, phi=None):
    """Per-path trapezoid of ``s -> (1 + mu([s,T]))(|Ddot_s F|^2 + int_s^T |Ddot|^2 dmu)`` on ``[a, b]``.

    Returns the fine rule and the rule on every other node (Richardson check).
    """
    if b <= a:
        B = len(ens.keys)
        return np.zeros(B), np.zeros(B)
    s = _nodes(a, b, n_nodes)
    g = F.slot_coords(ens)
    if phi is not None:
        g = g * phi[:, None, None]
    vals = []
    for sj in s:
        w, h, tl = energy_integrand(F, ens, sj, left=True, g=g)
        vals.append(w * (h + tl))
    vals = np.array(vals)
    fine = np.trapezoid(vals, s, axis=0)
    coarse = np.trapezoid(vals[::2], s[::2], axis=0)
    return fine, coarse


def _grid_nodes(cfg, a, b, n_nodes):
    s = _nodes(a, b, n_nodes)
    for t in s:
        cfg.knot(t)
    return s


def check_logsobolev(M, x, F, t0, t1, T, bounds, params, n_inner=64, n_nodes=9, use_oracle=True,
                     negative_control=False):
    """``E[G_{t1} log G_{t1}] - E[G_{t0} log G_{t0}] <= 4 int_{t0}^{t1} E_{s,T}(F, F) ds``, ``G_t = E(F^2|F_t)``."""
    if not (0 <= t0 <= t1 <= T):
        raise PreconditionError("need 0 <= t0 <= t1 <= T")
    cfg = params.config(T, 0)
    nodes = _grid_nodes(cfg, t0, t1, n_nodes) if t1 > t0 else [t0]
    ens = _ensemble(M, x, T, bounds, params, record_times=sorted(set(nodes) | set(F.times) | {t0, t1}))
    G1, v1 = conditional_expectation(F, ens, t1, 2, n_inner, use_oracle, workers=params.workers)
    G0, v0 = conditional_expectation(F, ens, t0, 2, n_inner, use_oracle, workers=params.workers)
    if np.any(G1 <= 0) or np.any(G0 <= 0):
        raise ConditioningError("E(F^2 | F_t) is not positive on every path; shift F")
    ent = G1 * np.log(G1) - G0 * np.log(G0)
    lhs = float(_kept(ens, ent).mean())
    fine, coarse = _trapezoid_energy(F, ens, t0, t1, n_nodes) if t1 > t0 else (np.zeros(len(ent)),) * 2
    rhs = 4.0 * fine
    info = _common(M, x, T, bounds, params, {"t0": t0, "t1": t1, "F": F.description, "n_nodes": n_nodes,
                                             "richardson": float(4.0 * (_kept(ens, fine) - _kept(ens, coarse)).mean()),
                                             "nested_inner_var": float(_kept(ens, v0 + v1).mean())})
    return _report("log-sobolev", ens, lhs, ent, rhs, info, negative_control)


def check_poincare(M, x, F, t, T, bounds, params, n_inner=64, n_nodes=9, use_oracle=True,
                   negative_control=False):
    """``E[E(F|F_t)^2] - (E F)^2 <= 2 int_0^t E_{s,T}(F, F) ds``."""
    if not (0 <= t <= T):
        raise PreconditionError("need 0 <= t <= T")
    cfg = params.config(T, 0)
    nodes = _grid_nodes(cfg, 0.0, t, n_nodes) if t > 0 else [0.0]
    ens = _ensemble(M, x, T, bounds, params, record_times=sorted(set(nodes) | set(F.times) | {t}))
    G, gv = conditional_expectation(F, ens, t, 1, n_inner, use_oracle, workers=params.workers)
    Fv = F.value(ens)
    Fbar = float(_kept(ens, Fv).mean())
    sq = G * G - gv
    lhs = float(_kept(ens, sq).mean()) - Fbar**2
    fine, coarse = _trapezoid_energy(F, ens, 0.0, t, n_nodes) if t > 0 else (np.zeros(len(G)),) * 2
    rhs = 2.0 * fine
    info = _common(M, x, T, bounds, params, {"t": t, "F": F.description, "n_nodes": n_nodes,
                                             "richardson": float(2.0 * (_kept(ens, fine) - _kept(ens, coarse)).mean())})
    return _report("poincare", ens, lhs, sq - 2.0 * Fbar * Fv, rhs, info, negative_control)


def check_truncated(M, x, F, mode, T, bounds, params, n_nodes=9, exit_threshold=1e-3,
                    negative_control=False):
    """Poincare (``t = T``) or log-Sobolev (``t0 = 0, t1 = T``) for ``Phi F``, ``Phi = ell(rho_tilde)``.

    ``Ddot (Phi F) = Phi Ddot F + F Ddot Phi``; the second term is bounded
    per path by ``|F| |ell'(rho_tilde)|`` and its effect on the right side is
    reported as a correction band, which is zero when ``Phi = 1`` on every
    path.
    """
    if F.cutoff is None:
        raise PreconditionError("check_truncated needs a cutoff")
    if mode not in ("poincare", "logsobolev"):
        raise PreconditionError(f"unknown mode {mode!r}")
    cfg = params.config(T, 0)
    nodes = _grid_nodes(cfg, 0.0, T, n_nodes)
    ens = _ensemble(M, x, T, bounds, params, record_times=sorted(set(nodes) | set(F.times)))
    cv = cutoff_value(F, ens)
    p_exit = float(_kept(ens, cv.phi < 1).mean())
    if p_exit > exit_threshold:
        raise PreconditionError(f"P(Phi < 1) = {p_exit:.3g} exceeds {exit_threshold}; widen r_in or shorten T")
    Fv = F.value(ens) * cv.phi
    fine, coarse = _trapezoid_energy(F, ens, 0.0, T, n_nodes, phi=cv.phi)
    # band: replace |Ddot| by |Ddot| + |F| |ell'| on the affected paths
    slope = np.abs(F.value(ens)) * cv.slope
    band = 0.0
    if np.any(slope > 0):
        w, h, tl = energy_integrand(F, ens, 0.0, left=True, g=F.slot_coords(ens) * cv.phi[:, None, None])
        mu_tot = mu_mass(ens, 0.0, T)
        extra = (1.0 + mu_tot) * (2.0 * np.sqrt(h) * slope + slope**2) * (1.0 + mu_tot) * T
        band = float(_kept(ens, extra).mean())
    if mode == "poincare":
        lhs = float(np.var(_kept(ens, Fv), ddof=1))
        inf = (Fv - _kept(ens, Fv).mean()) ** 2
        rhs = 2.0 * fine
        name = "truncated-poincare"
        band *= 2.0
    else:
        G1 = Fv**2
        if np.any(_kept(ens, G1) <= 0):
            raise ConditioningError("(Phi F)^2 vanishes on some path; shift F")
        G0 = float(_kept(ens, G1).mean())
        inf = G1 * np.log(G1) - G0 * math.log(G0)
        lhs = float(_kept(ens, inf).mean())
        rhs = 4.0 * fine
        name = "truncated-log-sobolev"
        band *= 4.0
    info = _common(M, x, T, bounds, params, {"F": F.description, "mode": mode, "exit_probability": p_exit,
                                             "r_in": F.cutoff.r_in, "r_out": F.cutoff.r_out})
    return _report(name, ens, lhs, inf, rhs, info, negative_control, band)
