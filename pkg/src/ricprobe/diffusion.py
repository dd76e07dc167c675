"""Simulation of the (reflecting) diffusion generated by ``Delta + Z`` with its frame.

The scheme is a geodesic Euler-Maruyama step::

    y = exp_x( sqrt(2) U dW + Z(x) dt )

followed, when ``y`` leaves the manifold, by a symmetric reflection across the
boundary along the normal geodesic.  The local-time increment is the distance
the point is pushed back along ``N``, i.e. twice the exterior depth; with
this choice ``X_{k+1} - X_k - sqrt(2) dW_k`` is exactly ``N dl_k`` on the
half-line.  Frames are parallel transported along the (broken) step and
re-orthonormalised by one modified Gram-Schmidt pass.

Ensembles are simulated in fixed-size chunks; every Gaussian increment is a
function of the path key, the step index and the component only (see
:mod:`ricprobe.rng`), so the result does not depend on the number of workers.
Optional online accumulators track the damped transport ``Q_{0,t}`` and the
exponent ``A(s) = int_0^s K dr + int_0^s sigma dl`` of the random measure.
"""

import math
import multiprocessing as mp
import os
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import rng
from .errors import DiscardBudgetError, PreconditionError, StepTooLargeError
from .geometry import TOL_BOUNDARY
from .transport import initial_Q, q_step

CHUNK = 4096
MAX_REFLECTIONS = 8
DISCARD_BUDGET = 1e-3
SQRT2 = math.sqrt(2.0)


@dataclass(frozen=True)
class SimConfig:
    T: float
    n_steps: int
    master_seed: int
    exit_radius: float = math.inf

    def __post_init__(self):
        if not (self.T > 0):
            raise PreconditionError(f"horizon must be positive, got {self.T}")
        if int(self.n_steps) < 1:
            raise PreconditionError("n_steps must be >= 1")

    @property
    def dt(self):
        return self.T / self.n_steps

    @property
    def grid(self):
        return np.linspace(0.0, self.T, self.n_steps + 1)

    def knot(self, t):
        k = int(round(t / self.dt))
        if abs(k * self.dt - t) > 1e-9 * max(1.0, self.T) or not 0 <= k <= self.n_steps:
            raise PreconditionError(f"time {t} is not on the simulation grid (dt={self.dt})")
        return k


def default_workers():
    return max(1, int(os.environ.get("RICPROBE_WORKERS", "1")))


@dataclass
class _PathData:
    """Arrays shared by single paths and ensembles.

    Knot-indexed arrays carry the recorded knots on their last-but-structure
    axis: ``X[..., j, :]`` is the point at ``times[j]``.
    """

    manifold: object
    cfg: SimConfig
    knots: np.ndarray
    times: np.ndarray
    X: np.ndarray
    U: np.ndarray
    l: np.ndarray
    hit: np.ndarray
    rho_max: np.ndarray
    rho_arg: np.ndarray
    exited_at: np.ndarray
    discarded: np.ndarray
    keys: np.ndarray
    start: np.ndarray
    A: np.ndarray = None
    mu_cum: np.ndarray = None
    Q: np.ndarray = None
    dW: np.ndarray = None
    dl: np.ndarray = None
    bounds: object = None
    antithetic: bool = False

    @property
    def full(self):
        return self.dW is not None

    def pos(self, t):
        """Position of time ``t`` among the recorded knots."""
        k = self.cfg.knot(t)
        j = int(np.searchsorted(self.knots, k))
        if j >= len(self.knots) or self.knots[j] != k:
            raise PreconditionError(f"time {t} was not recorded")
        return j


_SHARED = ("manifold", "cfg", "knots", "times", "bounds", "antithetic")


@dataclass
class PathSample(_PathData):
    """One discretised path ``(X, U, l, W)`` with its bookkeeping."""

    @property
    def path_seed(self):
        return int(self.keys)


@dataclass
class PathEnsemble(_PathData):
    """Paths from a common start; axis 0 indexes paths in key order."""

    def __len__(self):
        return len(self.keys)

    @property
    def kept(self):
        return ~self.discarded

    @property
    def discard_fraction(self):
        return float(np.mean(self.discarded)) if len(self) else 0.0

    def check_discards(self, budget=DISCARD_BUDGET):
        if self.discard_fraction > budget:
            raise DiscardBudgetError(
                f"{int(np.sum(self.discarded))} of {len(self)} paths discarded (budget {budget:.1e})"
            )

    def path(self, i):
        out = {}
        for f in fields(_PathData):
            v = getattr(self, f.name)
            if f.name in _SHARED or v is None:
                out[f.name] = v
            else:
                out[f.name] = v[i]
        return PathSample(**out)

    def subset(self, mask):
        out = {}
        for f in fields(_PathData):
            v = getattr(self, f.name)
            if f.name in _SHARED or v is None:
                out[f.name] = v
            else:
                out[f.name] = v[mask]
        return PathEnsemble(**out)


# -- one step ----------------------------------------------------------------


def _advance(M, X, F, dW, dt):
    """Vectorised step; returns (Y, F', dl, hit, boundary point, bad)."""
    v = SQRT2 * M.from_coords(F, dW)
    if M.drift is not None:
        v = v + M.drift_field(X) * dt
    Y = M.exp(X, v)
    B = X.shape[0]
    zero = np.zeros(B)
    if not M.has_boundary:
        return Y, M.reorthonormalize(Y, M.transport(X, Y, F)), zero, zero.astype(bool), None, zero.astype(bool)
    Y, depth = M.reflect_once(Y)
    hit = depth > 0
    total = depth
    bad = np.zeros(B, dtype=bool)
    for _ in range(MAX_REFLECTIONS - 1):
        dist, _n = M.boundary(Y)
        again = dist < -TOL_BOUNDARY
        if not np.any(again):
            break
        Y, dep = M.reflect_once(Y)
        total = total + dep
    else:
        dist, _n = M.boundary(Y)
        bad = dist < -TOL_BOUNDARY
    Fn = M.transport(X, Y, F)
    bpt = None
    if np.any(hit):
        idx = np.flatnonzero(hit)
        bpt = M.boundary_point(Y[idx])
        Fb = M.transport(X[idx], bpt, F[idx])
        Fn[idx] = M.transport(bpt, Y[idx], Fb)
    Fn = M.reorthonormalize(Y, Fn)
    return Y, Fn, 2.0 * total, hit, bpt, bad


def step(M, state, dt, dW):
    """One scheme step from ``(x, U, l)`` with Wiener increment ``dW``.

    Returns ``(y, U', dl)``.
    """
    x, F, _l = state
    x = np.asarray(x, dtype=float)[None]
    F = np.asarray(F, dtype=float)[None]
    dW = np.asarray(dW, dtype=float).reshape(1, -1)
    if not np.all(np.isfinite(dW)):
        raise PreconditionError("non-finite Wiener increment")
    Y, Fn, dl, _hit, _b, bad = _advance(M, x, F, dW, dt)
    if bad[0]:
        raise StepTooLargeError("reflection kept leaving the manifold")
    return Y[0], Fn[0], float(dl[0])


# -- ensembles ---------------------------------------------------------------


@dataclass
class _Job:
    M: object
    starts: np.ndarray
    frames: np.ndarray
    keys: np.ndarray
    signs: np.ndarray
    cfg: SimConfig
    knots: np.ndarray
    bounds: object = None
    track_Q: bool = False
    full: bool = False
    noise: object = None  # optional callable (keys, step) -> standard normals


def _simulate_chunk(job, lo, hi):
    M, cfg = job.M, job.cfg
    d, n = M.dim, M.ambient
    dt = cfg.dt
    sqdt = math.sqrt(dt)
    X = np.array(job.starts[lo:hi], dtype=float)
    F = np.array(job.frames[lo:hi], dtype=float)
    X0 = X.copy()
    keys = job.keys[lo:hi]
    signs = None if job.signs is None else job.signs[lo:hi]
    B = hi - lo
    knots = job.knots
    m = len(knots)
    slot = {int(k): j for j, k in enumerate(knots)}

    Q, on_b = initial_Q(M, X, F)
    if not job.track_Q:
        Q = None
    l = np.zeros(B)
    A = np.zeros(B)
    mu = np.zeros(B)
    rho_max = np.zeros(B)
    rho_arg = np.zeros(B, dtype=np.int64)
    exited = np.full(B, np.nan)
    bad_any = np.zeros(B, dtype=bool)

    rec = {
        "X": np.empty((B, m, n)),
        "U": np.empty((B, m, d, n)),
        "l": np.empty((B, m)),
        "hit": np.zeros((B, m), dtype=bool),
        "rho_max": np.empty((B, m)),
        "rho_arg": np.empty((B, m), dtype=np.int64),
    }
    if job.bounds is not None:
        rec["A"] = np.empty((B, m))
        rec["mu_cum"] = np.empty((B, m))
    if Q is not None:
        rec["Q"] = np.empty((B, m, d, d))
    if job.full:
        rec["dW"] = np.empty((B, cfg.n_steps, d))
        rec["dl"] = np.empty((B, cfg.n_steps))

    def record(j, hit):
        rec["X"][:, j] = X
        rec["U"][:, j] = F
        rec["l"][:, j] = l
        rec["hit"][:, j] = hit
        rec["rho_max"][:, j] = rho_max
        rec["rho_arg"][:, j] = rho_arg
        if job.bounds is not None:
            rec["A"][:, j] = A
            rec["mu_cum"][:, j] = mu
        if Q is not None:
            rec["Q"][:, j] = Q

    if 0 in slot:
        record(slot[0], on_b)
    for k in range(cfg.n_steps):
        if job.noise is not None:
            z = job.noise(keys, k)
        else:
            z = rng.normals(keys, k, d)
        if signs is not None:
            z = z * signs[:, None]
        dW = z * sqdt
        if job.bounds is not None:
            Kx = job.bounds.k(X)
        Y, Fn, dl, hit, bpt, bad = _advance(M, X, F, dW, dt)
        if np.any(bad):
            bad_any |= bad
            Y[bad], Fn[bad] = X[bad], F[bad]
            dl = np.where(bad, 0.0, dl)
            if bpt is not None:
                bpt = bpt[~bad[hit]]
            hit = hit & ~bad
        if Q is not None:
            Q = q_step(M, Q, X, F, Y, Fn, dl, hit, bpt, dt)
        if job.bounds is not None:
            sig = np.zeros(B)
            if np.any(hit):
                sig[hit] = job.bounds.s(bpt)
            dA = Kx * dt + sig * dl
            mu = mu + np.exp(A) * dA
            A = A + dA
        if job.full:
            rec["dW"][:, k] = dW
            rec["dl"][:, k] = dl
        l = l + dl
        X, F = Y, Fn
        rho = M.distance(X0, X)
        up = rho > rho_max
        rho_max = np.where(up, rho, rho_max)
        rho_arg = np.where(up, k + 1, rho_arg)
        newly = np.isnan(exited) & (rho >= cfg.exit_radius)
        exited[newly] = (k + 1) * dt
        j = slot.get(k + 1)
        if j is not None:
            record(j, hit)
    rec["exited_at"] = exited
    rec["discarded"] = bad_any
    return rec


_ACTIVE_JOB = None


def _chunk_worker(span):
    return _simulate_chunk(_ACTIVE_JOB, *span)


def _run(job, workers):
    global _ACTIVE_JOB
    B = len(job.keys)
    spans = [(lo, min(lo + CHUNK, B)) for lo in range(0, B, CHUNK)]
    workers = default_workers() if workers is None else int(workers)
    if workers <= 1 or len(spans) <= 1:
        parts = [_simulate_chunk(job, lo, hi) for lo, hi in spans]
    else:
        _ACTIVE_JOB = job
        try:
            with mp.get_context("fork").Pool(min(workers, len(spans))) as pool:
                parts = pool.map(_chunk_worker, spans, chunksize=1)
        finally:
            _ACTIVE_JOB = None
    out = {key: np.concatenate([p[key] for p in parts], axis=0) for key in parts[0]}
    return out


def _knots_for(cfg, record_times, full):
    if full:
        return np.arange(cfg.n_steps + 1)
    ks = {0, cfg.n_steps}
    for t in record_times or ():
        ks.add(cfg.knot(t))
    return np.array(sorted(ks))


def simulate_from(M, starts, frames, keys, cfg, *, signs=None, record_times=None, bounds=None,
                  track_Q=False, full=False, workers=None, noise=None):
    """Simulate one path per key from per-path starts and frames."""
    starts = np.asarray(starts, dtype=float)
    frames = np.asarray(frames, dtype=float)
    keys = np.asarray(keys, dtype=np.uint64)
    knots = _knots_for(cfg, record_times, full)
    job = _Job(M, starts, frames, keys, signs, cfg, knots, bounds, track_Q, full, noise)
    rec = _run(job, workers)
    return PathEnsemble(
        manifold=M, cfg=cfg, knots=knots, times=knots * cfg.dt, keys=keys, start=starts,
        bounds=bounds, **rec,
    )


def ensemble_keys(master_seed, n_paths, antithetic=False, first_index=0):
    """Path keys (and antithetic signs) for path indices ``first_index ..``."""
    idx = np.arange(first_index, first_index + n_paths, dtype=np.uint64)
    if not antithetic:
        return rng.path_keys(master_seed, idx), None
    keys = rng.path_keys(master_seed, idx // np.uint64(2))
    signs = np.where(idx % np.uint64(2) == 0, 1.0, -1.0)
    return keys, signs


def simulate_ensemble(M, x, U0, cfg, n_paths, *, record_times=None, bounds=None, track_Q=False,
                      antithetic=False, full=False, workers=None, first_index=0):
    """Simulate ``n_paths`` paths from ``(x, U0)``; path ``i`` uses key ``(seed, i)``.

    With ``antithetic`` paths ``2i`` and ``2i+1`` share a key and carry
    opposite increments.
    """
    x = M.check_point(x)
    U0 = M.check_frame(x, np.asarray(U0, dtype=float))
    if n_paths < 1:
        raise PreconditionError("empty ensemble")
    keys, signs = ensemble_keys(cfg.master_seed, n_paths, antithetic, first_index)
    starts = np.broadcast_to(x, (n_paths, M.ambient))
    frames = np.broadcast_to(U0, (n_paths,) + U0.shape)
    ens = simulate_from(M, starts, frames, keys, cfg, signs=signs, record_times=record_times,
                        bounds=bounds, track_Q=track_Q, full=full, workers=workers)
    ens.antithetic = bool(antithetic)
    return ens


def simulate(M, x, U0, cfg, *, path_index=0, bounds=None, track_Q=False, noise=None):
    """One fully recorded path with its own counter-based stream."""
    x = M.check_point(x)
    U0 = M.check_frame(x, np.asarray(U0, dtype=float))
    keys = rng.path_keys(cfg.master_seed, [path_index])
    ens = simulate_from(M, x[None], U0[None], keys, cfg, bounds=bounds, track_Q=track_Q,
                        full=True, workers=1, noise=noise)
    return ens.path(0)


def simulate_coupled(M, x1, x2, U0_pair, cfg, *, path_index=0, bounds=None, track_Q=False):
    """Two paths driven by the same Wiener increments."""
    U1, U2 = U0_pair
    p1 = simulate(M, x1, U1, cfg, path_index=path_index, bounds=bounds, track_Q=track_Q)
    p2 = simulate(M, x2, U2, cfg, path_index=path_index, bounds=bounds, track_Q=track_Q)
    return p1, p2


def with_bounds(paths, bounds):
    """Recompute ``A`` and ``mu_cum`` of fully recorded paths for new bounds."""
    if not paths.full:
        raise PreconditionError("bounds can only be re-applied to fully recorded paths")
    M, dt = paths.manifold, paths.cfg.dt
    X = paths.X
    Kx = bounds.k(X[..., :-1, :])
    sig = np.zeros_like(paths.dl)
    hit = paths.dl > 0
    if np.any(hit):
        sig[hit] = bounds.s(M.boundary_point(X[..., 1:, :][hit]))
    dA = Kx * dt + sig * paths.dl
    A = np.concatenate([np.zeros(dA.shape[:-1] + (1,)), np.cumsum(dA, axis=-1)], axis=-1)
    mu_cum = np.concatenate([np.zeros(dA.shape[:-1] + (1,)), np.cumsum(np.exp(A[..., :-1]) * dA, axis=-1)], axis=-1)
    return replace(paths, A=A, mu_cum=mu_cum, bounds=bounds)
